"""Preliminary (per-image) and final (per-patient) reports."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

from .agent import ChatClient, ChatTurn, Memory
from .domain import BBox, BiRadsCategory, LesionDescription, ProbePosition, Echo, Margin, Shape, parse_probe_label, worst_category
from .errors import ConfigError, ReportError, SonoChainError, SummaryUnavailable
from .tools import render_annotation, render_category, render_detections, render_lesion, render_probe

SCHEMA_VERSION = 1
UNLOCALIZED = "unlocalized"
SUMMARY_INSTRUCTION = "Please provide a summary of the given observations based on a probe position: {reports}"


@dataclass(frozen=True)
class PreliminaryReport:
    image_id: str
    body: str
    probe: ProbePosition | None = None
    category: BiRadsCategory | None = None
    lesion: LesionDescription | None = None
    detections: tuple[BBox, ...] | None = None
    annotation: str | None = None

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise ReportError(f"{self.image_id}: empty report body")
        if all(v is None for v in (self.probe, self.category, self.lesion, self.detections, self.annotation)):
            raise ReportError(f"{self.image_id}: report has no structured findings")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "image_id": self.image_id,
            "probe": self.probe.label if self.probe else None,
            "category": self.category.code if self.category else None,
            "lesion": _lesion_to_dict(self.lesion),
            "detections": [b.to_dict() for b in self.detections] if self.detections is not None else None,
            "annotation": self.annotation,
            "body": self.body,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PreliminaryReport":
        detections = data.get("detections")
        return cls(
            image_id=data["image_id"],
            body=data["body"],
            probe=parse_probe_label(data["probe"]) if data.get("probe") else None,
            category=BiRadsCategory.parse(data["category"]) if data.get("category") else None,
            lesion=_lesion_from_dict(data.get("lesion")),
            detections=tuple(BBox.from_dict(b) for b in detections) if detections is not None else None,
            annotation=data.get("annotation"),
        )


def _lesion_to_dict(lesion: LesionDescription | None) -> dict | None:
    if lesion is None:
        return None
    return {
        "shape": lesion.shape.value,
        "margin": lesion.margin.value,
        "echo": lesion.echo.value,
        "confidences": list(lesion.confidences),
    }


def _lesion_from_dict(data: dict | None) -> LesionDescription | None:
    if data is None:
        return None
    return LesionDescription(
        Shape.parse(data["shape"]),
        Margin.parse(data["margin"]),
        Echo.parse(data["echo"]),
        tuple(data["confidences"]),
    )


def make_preliminary(image_id: str, memory: Memory) -> PreliminaryReport:
    """Collect typed payloads from memory and render the fixed-order body:
    probe, category, description, detections, annotation."""
    if not len(memory):
        raise ReportError(f"{image_id}: memory is empty")
    fields: dict = {}
    for obs in memory:
        payload = obs.payload
        if isinstance(payload, ProbePosition):
            fields["probe"] = payload
        elif isinstance(payload, BiRadsCategory):
            fields["category"] = payload
        elif isinstance(payload, LesionDescription):
            fields["lesion"] = payload
        elif obs.tool == "detection_tool" and isinstance(payload, (list, tuple)):
            fields["detections"] = tuple(payload)
        elif obs.tool == "ocr_tool" and isinstance(payload, str):
            fields["annotation"] = payload
    if not fields:
        raise ReportError(f"{image_id}: memory holds no structured observations")
    sentences = []
    if "probe" in fields:
        sentences.append(render_probe(fields["probe"]))
    if "category" in fields:
        sentences.append(render_category(fields["category"]))
    if "lesion" in fields:
        sentences.append(render_lesion(fields["lesion"]))
    if "detections" in fields:
        sentences.append(render_detections(list(fields["detections"])))
    if "annotation" in fields:
        sentences.append(render_annotation(fields["annotation"]))
    return PreliminaryReport(image_id=image_id, body=" ".join(sentences), **fields)


@dataclass(frozen=True)
class FinalSection:
    probe: ProbePosition | None  # None collects reports without a probe position
    category: BiRadsCategory | None
    description: str
    image_ids: tuple[str, ...]

    @property
    def heading(self) -> str:
        return self.probe.label if self.probe else UNLOCALIZED

    def to_dict(self) -> dict:
        return {
            "probe": self.probe.label if self.probe else None,
            "category": self.category.code if self.category else None,
            "description": self.description,
            "image_ids": list(self.image_ids),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FinalSection":
        return cls(
            probe=parse_probe_label(data["probe"]) if data.get("probe") else None,
            category=BiRadsCategory.parse(data["category"]) if data.get("category") else None,
            description=data["description"],
            image_ids=tuple(data["image_ids"]),
        )


@dataclass(frozen=True)
class FinalReport:
    patient_id: str
    sections: tuple[FinalSection, ...]
    overall_category: BiRadsCategory | None
    degraded: bool = False
    failures: tuple[tuple[str, str], ...] = ()  # (image_id, error)
    llm_summary: str | None = None

    def __post_init__(self) -> None:
        probes = [s.probe for s in self.sections]
        if len(set(probes)) != len(probes):
            raise ReportError("final report sections must have unique probe positions")
        cats = [s.category for s in self.sections if s.category is not None]
        expected = worst_category(cats) if cats else None
        if self.overall_category != expected:
            raise ReportError(f"overall category {self.overall_category} != worst section category {expected}")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "patient_id": self.patient_id,
            "overall_category": self.overall_category.code if self.overall_category else None,
            "degraded": self.degraded,
            "failures": [{"image_id": i, "error": e} for i, e in self.failures],
            "sections": [s.to_dict() for s in self.sections],
            "llm_summary": self.llm_summary,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FinalReport":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ReportError(f"unsupported final report schema_version {data.get('schema_version')!r}")
        return cls(
            patient_id=data["patient_id"],
            sections=tuple(FinalSection.from_dict(s) for s in data["sections"]),
            overall_category=BiRadsCategory.parse(data["overall_category"]) if data.get("overall_category") else None,
            degraded=bool(data.get("degraded", False)),
            failures=tuple((f["image_id"], f["error"]) for f in data.get("failures", [])),
            llm_summary=data.get("llm_summary"),
        )


def _normalize(sentence: str) -> str:
    return " ".join(sentence.split())


def _section_order(probe: ProbePosition | None) -> int:
    # ProbePosition.index already runs right side first, then region order.
    return probe.index if probe is not None else 10_000


def aggregate_final(
    patient_id: str,
    reports: Sequence[PreliminaryReport],
    *,
    failures: Iterable[tuple[str, str]] = (),
) -> FinalReport:
    """Group preliminary reports by probe position.

    Each section takes the worst category of its images and the distinct
    lesion sentences of its images in image-id order.
    """
    if not reports:
        raise ReportError(f"{patient_id}: no preliminary reports to aggregate")
    ids = [r.image_id for r in reports]
    if len(set(ids)) != len(ids):
        raise ReportError(f"{patient_id}: duplicate image ids in preliminary reports")
    groups: dict[ProbePosition | None, list[PreliminaryReport]] = {}
    for report in sorted(reports, key=lambda r: r.image_id):
        groups.setdefault(report.probe, []).append(report)
    sections = []
    for probe in sorted(groups, key=_section_order):
        members = groups[probe]
        cats = [r.category for r in members if r.category is not None]
        sentences: list[str] = []
        for r in members:
            if r.lesion is not None:
                sentence = _normalize(render_lesion(r.lesion))
                if sentence not in sentences:
                    sentences.append(sentence)
        sections.append(
            FinalSection(
                probe=probe,
                category=worst_category(cats) if cats else None,
                description=" ".join(sentences),
                image_ids=tuple(r.image_id for r in members),
            )
        )
    section_cats = [s.category for s in sections if s.category is not None]
    failures = tuple(sorted(failures))
    return FinalReport(
        patient_id=patient_id,
        sections=tuple(sections),
        overall_category=worst_category(section_cats) if section_cats else None,
        degraded=bool(failures),
        failures=failures,
    )


def summarize_final_llm(reports: Sequence[PreliminaryReport], client: ChatClient) -> str:
    """Ask the chat model for a probe-position summary of all preliminary bodies."""
    if not reports:
        raise ReportError("no preliminary reports to summarize")
    joined = "\n\n".join(r.body for r in sorted(reports, key=lambda r: r.image_id))
    prompt = SUMMARY_INSTRUCTION.format(reports=joined)
    try:
        return client.complete([ChatTurn("user", prompt)])
    except SonoChainError as exc:
        raise SummaryUnavailable(f"LLM summary failed: {exc}") from exc


def render(report: PreliminaryReport | FinalReport, fmt: str = "markdown") -> bytes:
    fmt = {"md": "markdown"}.get(fmt, fmt)
    if fmt == "json":
        return (json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n").encode("utf-8")
    if fmt != "markdown":
        raise ConfigError(f"unknown report format {fmt!r}; expected markdown or json")
    if isinstance(report, PreliminaryReport):
        text = f"# Preliminary report: {report.image_id}\n\n{report.body}\n"
    else:
        text = _final_markdown(report)
    return text.encode("utf-8")


def _final_markdown(report: FinalReport) -> str:
    overall = f"{report.overall_category.code} ({report.overall_category.meaning})" if report.overall_category else "n/a"
    lines = [f"# Final report: {report.patient_id}", "", f"Overall category: {overall}", ""]
    if report.degraded:
        lines += ["**Degraded:** some images could not be processed.", ""]
        lines += [f"- {image_id}: {error}" for image_id, error in report.failures]
        lines.append("")
    for section in report.sections:
        cat = f"{section.category.code} ({section.category.meaning})" if section.category else "n/a"
        lines += [
            f"## {section.heading}",
            "",
            f"- Category: {cat}",
            f"- Description: {section.description or 'No lesion description.'}",
            f"- Images: {', '.join(section.image_ids)}",
            "",
        ]
    if report.llm_summary:
        lines += ["## LLM summary", "", report.llm_summary.strip(), ""]
    return "\n".join(lines)


def parse_final_json(data: bytes | str) -> FinalReport:
    return FinalReport.from_dict(json.loads(data))
