"""Command-line entry point.

Exit codes: 0 success, 2 input error, 3 config error, 4 backend error,
5 chain error. Failures print a one-line JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .agent import HttpChatClient, Instruction, LLMPlanner, RulePlanner, execute_chain
from .config import EngineConfig, StudyManifest, load_config
from .domain import CategoryClass, Echo, ImageRecord, Margin, Shape, all_probe_positions
from .errors import ConfigError, InputError, SonoChainError, SummaryUnavailable
from .inference import Backend, TaskId
from .metrics import (
    classification_metrics,
    clinical_mean,
    confusion,
    format_table,
    load_clinical_scores,
    load_detection_pairs,
    load_eval_records,
    mean_best_iou,
)
from .regions import LayoutConfig, load_layouts
from .reports import PreliminaryReport, aggregate_final, make_preliminary, render, summarize_final_llm
from .tools import ToolRegistry

logger = logging.getLogger("sonochain")

DEFAULT_INSTRUCTION = (
    "Give me a probe information for the given image: {image path}. "
    "Then, provide a category of image and description of it."
)

EVAL_TASKS = ("shape", "margin", "echo", "category", "probe", "detect", "clinical")


class Engine:
    """Resolved runtime objects shared by every image of a run."""

    def __init__(self, config: EngineConfig) -> None:
        self.config = config
        if config.planner == "llm" and not config.llm_endpoint:
            raise ConfigError("planner 'llm' needs an LLM endpoint (config [llm] endpoint or SONOCHAIN_LLM_ENDPOINT)")
        if not config.layout:
            raise ConfigError("no layout configured; pass --layout <file>")
        self.layouts = load_layouts(config.layout)
        self.registry: ToolRegistry = config.registry()
        self.backend: Backend = config.backend_descriptor().build()

    def chat_client(self) -> HttpChatClient:
        return HttpChatClient(self.config.llm_endpoint, model=self.config.llm_model, timeout=self.config.timeout)

    def planner(self):
        # LLM planners keep a transcript, so each chain gets its own.
        if self.config.planner == "llm":
            return LLMPlanner(self.chat_client())
        return RulePlanner()

    def layout_for(self, layout_id: str | None) -> LayoutConfig:
        if layout_id in self.layouts:
            return self.layouts[layout_id]
        if layout_id in (None, "default") and len(self.layouts) == 1:
            return next(iter(self.layouts.values()))
        raise ConfigError(f"layout {layout_id!r} not found; available: {sorted(self.layouts)}")

    def preliminary(self, image: ImageRecord, instruction_text: str) -> PreliminaryReport:
        if not Path(image.raster_ref).is_file():
            raise InputError(f"image not found: {image.raster_ref}")
        instruction = Instruction.from_text(instruction_text, image.raster_ref)
        memory, _ = execute_chain(
            instruction,
            image,
            self.planner(),
            self.registry,
            self.backend,
            self.layout_for(image.layout_id),
            max_iterations=self.config.max_iterations,
            **self.config.tool_settings(),
        )
        return make_preliminary(image.image_id, memory)


def _write(path: Path, data: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def _config_from_args(args: argparse.Namespace) -> EngineConfig:
    flags = {
        name: getattr(args, name, None)
        for name in ("backend", "planner", "layout", "out", "workers", "format")
    }
    return load_config(args.config, flags)


def cmd_report_image(args: argparse.Namespace) -> int:
    image_path = Path(args.image)
    if not image_path.is_file():
        raise InputError(f"image not found: {image_path}")
    config = _config_from_args(args)
    engine = Engine(config)
    record = ImageRecord(
        image_id=args.image_id or image_path.stem,
        raster_ref=str(image_path),
        layout_id=args.layout_id or "default",
    )
    report = engine.preliminary(record, args.instruction)
    fmt = "json" if config.format == "json" else "markdown"
    suffix = "json" if fmt == "json" else "md"
    out = _write(Path(config.out) / f"{record.image_id}.prelim.{suffix}", render(report, fmt))
    print(out)
    return 0


def cmd_report_study(args: argparse.Namespace) -> int:
    manifest = StudyManifest.load(args.manifest)
    config = _config_from_args(args)
    engine = Engine(config)

    def run(image: ImageRecord):
        try:
            return engine.preliminary(image, args.instruction)
        except SonoChainError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(run, manifest.images))

    out_dir = Path(config.out)
    reports, failures, errors = [], [], []
    for image, result in zip(manifest.images, results):
        if isinstance(result, SonoChainError):
            logger.warning("%s failed: %s", image.image_id, result)
            failures.append((image.image_id, f"{type(result).__name__}: {result}"))
            errors.append(result)
        else:
            reports.append(result)
            _write(out_dir / f"{image.image_id}.prelim.md", render(result, "markdown"))
    if not reports:
        raise errors[0]

    final = aggregate_final(manifest.patient_id, reports, failures=failures)
    if config.llm_endpoint:
        try:
            summary = summarize_final_llm(reports, engine.chat_client())
            final = replace(final, llm_summary=summary)
        except SummaryUnavailable as exc:
            logger.warning("%s", exc)
    md = _write(out_dir / f"{manifest.patient_id}.final.md", render(final, "markdown"))
    js = _write(out_dir / f"{manifest.patient_id}.final.json", render(final, "json"))
    print(md)
    print(js)
    if final.degraded:
        print(f"degraded: {len(failures)} of {len(manifest.images)} images failed", file=sys.stderr)
    return 0


def _labels(task: TaskId) -> list[str]:
    if task is TaskId.PROBE:
        return [p.label for p in all_probe_positions()]
    enum = {TaskId.SHAPE: Shape, TaskId.MARGIN: Margin, TaskId.ECHO: Echo, TaskId.CATEGORY: CategoryClass}[task]
    return [m.value for m in enum]


def cmd_eval(args: argparse.Namespace) -> int:
    out_dir = Path(args.out or ".")
    if args.task == "clinical":
        scores = load_clinical_scores(args.records)
        mean = clinical_mean(scores)
        result = {"task": "clinical", "n": len(scores), "mean": mean, "mean_2dp": f"{mean:.2f}"}
        table = f"clinical score mean over {len(scores)} studies: {mean:.2f}\n"
    elif args.task == "detect":
        pairs = load_detection_pairs(args.records)
        value = mean_best_iou(pairs)
        n = sum(len(t) for t, _ in pairs)
        result = {"task": "detect", "n_truth_boxes": n, "mean_iou": value, "protocol": "mean best-overlap IoU"}
        table = f"mean best-overlap IoU over {n} ground-truth boxes: {value:.4f}\n"
    else:
        task = TaskId.parse(args.task)
        records = load_eval_records(args.records, task)
        if not records:
            raise InputError(f"{args.records}: no records")
        cm = confusion(records)
        metrics = classification_metrics(cm)
        result = {"task": task.value, "n": cm.total, "confusion": cm.to_list(), "labels": _labels(task), **metrics.to_dict()}
        table = format_table(cm, metrics, _labels(task))
    _write(out_dir / f"{args.task}.metrics.json", (json.dumps(result, indent=2) + "\n").encode())
    _write(out_dir / f"{args.task}.metrics.txt", table.encode())
    sys.stdout.write(table)
    return 0


def cmd_tools_list(args: argparse.Namespace) -> int:
    registry = load_config(args.config, {}).registry() if args.config else ToolRegistry()
    if args.format == "json":
        print(json.dumps(registry.to_list(), indent=2))
    else:
        for spec in registry.specs:
            print(f"{spec.name} [{spec.region}]\n    {spec.description}")
    return 0


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", help="fixture:<path> or remote:<url>")
    p.add_argument("--planner", choices=("rule", "llm"))
    p.add_argument("--layout", help="layout JSON file")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="parallel images per study (default 4)")
    p.add_argument("--format", choices=("markdown", "md", "json"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sonochain", description="Breast ultrasound report agent")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("report-image", help="preliminary report for one image")
    p.add_argument("image")
    p.add_argument("--instruction", default=DEFAULT_INSTRUCTION)
    p.add_argument("--image-id", help="fixture/backend key (default: file stem)")
    p.add_argument("--layout-id")
    _add_engine_flags(p)
    p.set_defaults(func=cmd_report_image)

    p = sub.add_parser("report-study", help="preliminary and final reports for a study manifest")
    p.add_argument("manifest")
    p.add_argument("--instruction", default=DEFAULT_INSTRUCTION)
    _add_engine_flags(p)
    p.set_defaults(func=cmd_report_study)

    p = sub.add_parser("eval", help="metrics from evaluation records")
    p.add_argument("records")
    p.add_argument("--task", required=True, choices=EVAL_TASKS)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tools-list", help="show the tool registry")
    p.add_argument("--config")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_tools_list)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SonoChainError as exc:
        error = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(error), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
