"""The report tools.

Each tool pulls one or more answers from a backend, applies its decision rule
and renders a single observation sentence from a fixed template.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .domain import (
    BBox,
    BiRadsCategory,
    CategoryClass,
    Echo,
    LesionDescription,
    Margin,
    ProbePosition,
    ProbVector,
    Shape,
)
from .errors import BackendError, ConfigError
from .inference import Backend, TaskId
from .regions import Raster

BENIGN_THRESHOLD = 0.85
MALIGNANT_THRESHOLD = 0.95
DETECTION_CUTOFF = 0.5

TEMPLATES = {
    "probe": "The probe information of the given image is {label}.",
    "category": "The category of the given image is {code} ({meaning}).",
    "lesion": "It appears {shape} shape, {margin} margin and {echo} echo.",
    "detection": "A suspicious finding is located at [{x0:.2f}, {y0:.2f}, {x1:.2f}, {y1:.2f}] (score {score:.2f}).",
    "no_detection": "No suspicious finding detected.",
    "annotation": "Annotation: {text}.",
}


def render_probe(position: ProbePosition) -> str:
    return TEMPLATES["probe"].format(label=position.long_label)


def render_category(category: BiRadsCategory) -> str:
    return TEMPLATES["category"].format(code=category.code, meaning=category.meaning)


def render_lesion(lesion: LesionDescription) -> str:
    return TEMPLATES["lesion"].format(shape=lesion.shape, margin=lesion.margin, echo=lesion.echo)


def render_detections(boxes: list[BBox]) -> str:
    if not boxes:
        return TEMPLATES["no_detection"]
    return " ".join(TEMPLATES["detection"].format(**box.to_dict()) for box in boxes)


def render_annotation(text: str) -> str:
    return TEMPLATES["annotation"].format(text=text or "(none)")


def refine_category(
    probs: ProbVector,
    benign_threshold: float = BENIGN_THRESHOLD,
    malignant_threshold: float = MALIGNANT_THRESHOLD,
) -> BiRadsCategory:
    """Map a benign/malignant/normal vector onto C1..C5.

    A confident benign or malignant prediction (probability at or above its
    threshold) keeps C2 or C5; anything weaker drops to C3 or C4.
    """
    index, p = probs.top()
    cls = CategoryClass.from_index(index)
    if cls is CategoryClass.NORMAL:
        return BiRadsCategory.C1
    if cls is CategoryClass.BENIGN:
        return BiRadsCategory.C2 if p >= benign_threshold else BiRadsCategory.C3
    return BiRadsCategory.C5 if p >= malignant_threshold else BiRadsCategory.C4


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    region: str  # layout region the tool reads
    template: str  # key into TEMPLATES

    def to_dict(self) -> dict:
        return {"name": self.name, "description": self.description, "region": self.region, "template": self.template}


@dataclass(frozen=True)
class ToolObservation:
    tool: str
    payload: Any
    text: str


@dataclass
class ToolContext:
    """Everything a tool may read for one image."""

    image_id: str
    regions: Mapping[str, Raster]
    backend: Backend
    benign_threshold: float = BENIGN_THRESHOLD
    malignant_threshold: float = MALIGNANT_THRESHOLD
    detection_cutoff: float = DETECTION_CUTOFF

    def region(self, name: str) -> Raster | None:
        return self.regions.get(name)


@dataclass(frozen=True)
class Tool:
    spec: ToolSpec
    run: Callable[[ToolContext], ToolObservation] = field(compare=False)

    @property
    def name(self) -> str:
        return self.spec.name

    def __call__(self, ctx: ToolContext) -> ToolObservation:
        return self.run(ctx)


def _labeled(task: TaskId, fn, *args):
    try:
        return fn(*args)
    except BackendError as exc:
        labeled = type(exc)(f"{task.value} sub-task: {exc}")
        labeled.subtask = task.value
        raise labeled from exc


def suspicious_description(ctx: ToolContext) -> ToolObservation:
    main = ctx.region("main")
    picks = []
    for task, enum in ((TaskId.SHAPE, Shape), (TaskId.MARGIN, Margin), (TaskId.ECHO, Echo)):
        index, p = _labeled(task, ctx.backend.classify, task, ctx.image_id, main).top()
        picks.append((enum.from_index(index), p))
    (shape, ps), (margin, pm), (echo, pe) = picks
    lesion = LesionDescription(shape, margin, echo, confidences=(ps, pm, pe))
    return ToolObservation("suspicious_description_tool", lesion, render_lesion(lesion))


def category_classification(ctx: ToolContext) -> ToolObservation:
    probs = ctx.backend.classify(TaskId.CATEGORY, ctx.image_id, ctx.region("main"))
    category = refine_category(probs, ctx.benign_threshold, ctx.malignant_threshold)
    return ToolObservation("category_tool", category, render_category(category))


def probe_information(ctx: ToolContext) -> ToolObservation:
    probs = ctx.backend.classify(TaskId.PROBE, ctx.image_id, ctx.region("probe_mark"))
    position = ProbePosition.from_index(probs.argmax())
    return ToolObservation("probe_tool", position, render_probe(position))


def suspicious_detection(ctx: ToolContext) -> ToolObservation:
    boxes = [b for b in ctx.backend.detect(ctx.image_id, ctx.region("main")) if b.score >= ctx.detection_cutoff]
    return ToolObservation("detection_tool", boxes, render_detections(boxes))


def ocr(ctx: ToolContext) -> ToolObservation:
    strip = ctx.region("ocr_strip")
    if strip is None:
        raise ConfigError("ocr_tool needs an 'ocr_strip' region in the layout")
    text = ctx.backend.recognize_text(ctx.image_id, strip)
    return ToolObservation("ocr_tool", text, render_annotation(text))


DEFAULT_TOOLS = (
    Tool(
        ToolSpec(
            "probe_tool",
            "Probe information tool: reads the probe position mark and reports where the probe touched "
            "the breast (left/right nipple, lymph node, UIQ, UOQ, LOQ or LIQ). Use for probe information.",
            "probe_mark",
            "probe",
        ),
        probe_information,
    ),
    Tool(
        ToolSpec(
            "category_tool",
            "Category classification tool: assigns the BI-RADS category (C1-C5) of the main image. "
            "Use for the category of an image.",
            "main",
            "category",
        ),
        category_classification,
    ),
    Tool(
        ToolSpec(
            "suspicious_description_tool",
            "Suspicious description tool: describes the shape, margin and echo pattern of the "
            "suspicious lesion in the main image. Use to describe an image.",
            "main",
            "lesion",
        ),
        suspicious_description,
    ),
    Tool(
        ToolSpec(
            "detection_tool",
            "Suspicious detection tool: locates suspicious findings in the main image as bounding boxes. "
            "Use when asked whether there is any suspicious thing.",
            "main",
            "detection",
        ),
        suspicious_detection,
    ),
    Tool(
        ToolSpec(
            "ocr_tool",
            "OCR tool: reads the text annotation printed on the image, such as distance from reference "
            "points and direction. Use for annotation text.",
            "ocr_strip",
            "annotation",
        ),
        ocr,
    ),
)


class ToolRegistry:
    """Ordered name -> Tool mapping with unique names."""

    def __init__(self, tools=DEFAULT_TOOLS) -> None:
        self._tools: dict[str, Tool] = {}
        for tool in tools:
            if tool.name in self._tools:
                raise ConfigError(f"duplicate tool name: {tool.name}")
            if not tool.spec.description.strip():
                raise ConfigError(f"tool {tool.name} has an empty description")
            self._tools[tool.name] = tool

    def __contains__(self, name: object) -> bool:
        return name in self._tools

    def __getitem__(self, name: str) -> Tool:
        return self._tools[name]

    def __iter__(self):
        return iter(self._tools.values())

    def __len__(self) -> int:
        return len(self._tools)

    @property
    def names(self) -> list[str]:
        return list(self._tools)

    @property
    def specs(self) -> list[ToolSpec]:
        return [t.spec for t in self._tools.values()]

    def subset(self, names) -> "ToolRegistry":
        missing = [n for n in names if n not in self._tools]
        if missing:
            raise ConfigError(f"unknown tools: {missing}; available: {self.names}")
        return ToolRegistry([self._tools[n] for n in names])

    def with_descriptions(self, overrides: Mapping[str, str]) -> "ToolRegistry":
        tools = []
        for tool in self:
            if tool.name in overrides:
                spec = ToolSpec(tool.name, overrides[tool.name], tool.spec.region, tool.spec.template)
                tool = Tool(spec, tool.run)
            tools.append(tool)
        return ToolRegistry(tools)

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self.specs]
