"""Evaluation: confusion matrices, macro-averaged classification metrics,
box IoU and clinical score means."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .domain import BBox, ClinicalScore
from .errors import DomainError, EvalError
from .inference import TaskId


@dataclass(frozen=True)
class EvalRecord:
    image_id: str
    task: TaskId
    truth: int
    pred: int

    def __post_init__(self) -> None:
        k = self.task.class_count
        if k is None:
            raise EvalError(f"{self.image_id}: {self.task} is not a classification task")
        for name in ("truth", "pred"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < k:
                raise EvalError(f"{self.image_id}: {name} label {v!r} outside 0..{k - 1}")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are truth, columns are prediction."""

    k: int
    counts: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if len(self.counts) != self.k or any(len(row) != self.k for row in self.counts):
            raise EvalError(f"confusion matrix must be {self.k}x{self.k}")
        if any(c < 0 for row in self.counts for c in row):
            raise EvalError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    @property
    def trace(self) -> int:
        return sum(self.counts[i][i] for i in range(self.k))

    def to_list(self) -> list[list[int]]:
        return [list(row) for row in self.counts]


def confusion(records: Sequence[EvalRecord], k: int | None = None) -> ConfusionMatrix:
    if not records:
        raise EvalError("no evaluation records")
    tasks = {r.task for r in records}
    if len(tasks) > 1:
        raise EvalError(f"records mix tasks: {sorted(t.value for t in tasks)}")
    k = k or records[0].task.class_count
    counts = [[0] * k for _ in range(k)]
    for r in records:
        counts[r.truth][r.pred] += 1
    return ConfusionMatrix(k, tuple(map(tuple, counts)))


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    # (class index, "precision" | "recall") pairs where 0/0 was taken as 0
    zero_division: tuple[tuple[int, str], ...] = field(default=())
    averaging: str = "macro"

    def to_dict(self) -> dict:
        return {
            "averaging": self.averaging,
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": {
                "precision": list(self.precision),
                "recall": list(self.recall),
                "f1": list(self.f1),
            },
            "zero_division": [{"class": c, "metric": m} for c, m in self.zero_division],
        }


def classification_metrics(cm: ConfusionMatrix) -> ClassificationMetrics:
    total = cm.total
    if total == 0:
        raise EvalError("confusion matrix is empty")
    precision, recall, f1, flags = [], [], [], []
    for c in range(cm.k):
        tp = cm.counts[c][c]
        predicted = sum(cm.counts[t][c] for t in range(cm.k))
        actual = sum(cm.counts[c])
        if predicted:
            p = tp / predicted
        else:
            p = 0.0
            flags.append((c, "precision"))
        if actual:
            r = tp / actual
        else:
            r = 0.0
            flags.append((c, "recall"))
        precision.append(p)
        recall.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return ClassificationMetrics(
        accuracy=cm.trace / total,
        macro_precision=sum(precision) / cm.k,
        macro_recall=sum(recall) / cm.k,
        macro_f1=sum(f1) / cm.k,
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        zero_division=tuple(flags),
    )


def iou(a: BBox, b: BBox) -> float:
    w = min(a.x1, b.x1) - max(a.x0, b.x0)
    h = min(a.y1, b.y1) - max(a.y0, b.y0)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def mean_best_iou(pairs: Iterable[tuple[Sequence[BBox], Sequence[BBox]]]) -> float:
    """Mean over truth boxes of the best IoU against that image's predictions
    (0 for a truth box with no overlapping prediction)."""
    scores = []
    for truths, preds in pairs:
        for t in truths:
            scores.append(max((iou(t, p) for p in preds), default=0.0))
    if not scores:
        raise EvalError("no ground-truth boxes to evaluate")
    return statistics.fmean(scores)


def clinical_mean(scores: Sequence[ClinicalScore | int]) -> float:
    """Arithmetic mean at full precision; format with ``:.2f`` for reporting."""
    if not scores:
        raise EvalError("no clinical scores")
    values = [s.value if isinstance(s, ClinicalScore) else ClinicalScore(s).value for s in scores]
    return statistics.fmean(values)


# --- record files ---------------------------------------------------------


def _rows(path: Path) -> list[tuple[int, dict]]:
    """(line number, row) pairs from a CSV with header or a JSONL file."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise EvalError(f"cannot read {path}: {exc}") from None
    rows = []
    if path.suffix.lower() in (".jsonl", ".ndjson", ".json"):
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EvalError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(row, dict):
                raise EvalError(f"{path}:{lineno}: expected a JSON object")
            rows.append((lineno, row))
        return rows
    reader = csv.DictReader(io.StringIO(text))
    for row in reader:
        rows.append((reader.line_num, row))
    return rows


def load_eval_records(path: str | Path, task: TaskId | None = None) -> list[EvalRecord]:
    """Read ``image_id,task,truth,pred`` records; every bad line is reported."""
    path = Path(path)
    records, problems = [], []
    for lineno, row in _rows(path):
        try:
            if None in row or any(row.get(c) in (None, "") for c in ("image_id", "task", "truth", "pred")):
                raise ValueError("expected columns image_id,task,truth,pred")
            rec_task = TaskId(str(row["task"]).strip().lower())
            records.append(EvalRecord(str(row["image_id"]), rec_task, _as_int(row["truth"]), _as_int(row["pred"])))
        except (ValueError, EvalError) as exc:
            problems.append(f"line {lineno}: {exc}")
    if problems:
        raise EvalError(f"{path}: " + "; ".join(problems))
    if task is not None:
        other = sorted({r.task.value for r in records if r.task is not task})
        if other:
            raise EvalError(f"{path}: records for {other} found while evaluating {task}")
    return records


def _as_int(value) -> int:
    if isinstance(value, int) and not isinstance(value, bool):
        return value
    token = str(value).strip()
    if not token.lstrip("-").isdigit():
        raise ValueError(f"label {value!r} is not an integer")
    return int(token)


def load_detection_pairs(path: str | Path) -> list[tuple[list[BBox], list[BBox]]]:
    """JSONL rows ``{"image_id", "truth": [box...], "pred": [box...]}``."""
    path = Path(path)
    pairs, problems = [], []
    for lineno, row in _rows(path):
        try:
            truth = [BBox.from_dict(b) for b in row["truth"]]
            pred = [BBox.from_dict(b) for b in row.get("pred", [])]
            pairs.append((truth, pred))
        except (KeyError, TypeError, DomainError) as exc:
            problems.append(f"line {lineno}: {exc}")
    if problems:
        raise EvalError(f"{path}: " + "; ".join(problems))
    return pairs


def load_clinical_scores(path: str | Path) -> list[ClinicalScore]:
    """CSV (``study_id,score``) or JSONL rows with a ``score`` field."""
    path = Path(path)
    scores, problems = [], []
    for lineno, row in _rows(path):
        try:
            scores.append(ClinicalScore.parse(row["score"]))
        except (KeyError, TypeError, DomainError) as exc:
            problems.append(f"line {lineno}: {exc}")
    if problems:
        raise EvalError(f"{path}: " + "; ".join(problems))
    return scores


def format_table(cm: ConfusionMatrix, metrics: ClassificationMetrics, labels: Sequence[str] | None = None) -> str:
    labels = list(labels) if labels else [str(i) for i in range(cm.k)]
    width = max(8, *(len(s) for s in labels)) + 1
    lines = ["confusion matrix (rows = truth, columns = prediction)"]
    lines.append(" " * width + "".join(f"{s:>{width}}" for s in labels))
    for label, row in zip(labels, cm.counts):
        lines.append(f"{label:<{width}}" + "".join(f"{c:>{width}}" for c in row))
    lines.append("")
    lines.append(f"{'class':<{width}}{'precision':>10}{'recall':>10}{'f1':>10}")
    for i, label in enumerate(labels):
        lines.append(f"{label:<{width}}{metrics.precision[i]:>10.4f}{metrics.recall[i]:>10.4f}{metrics.f1[i]:>10.4f}")
    lines.append("")
    lines.append(f"accuracy        {metrics.accuracy:.4f}")
    lines.append(f"macro precision {metrics.macro_precision:.4f}")
    lines.append(f"macro recall    {metrics.macro_recall:.4f}")
    lines.append(f"macro f1        {metrics.macro_f1:.4f}")
    for c, m in metrics.zero_division:
        lines.append(f"warning: {m} of class {labels[c]} is 0/0, counted as 0")
    return "\n".join(lines) + "\n"
