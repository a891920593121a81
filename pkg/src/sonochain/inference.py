"""Inference backends answering classification, detection and OCR queries.

Two implementations share one validating front door (:class:`Backend`):

* :class:`FixtureBackend` looks answers up in a JSON Lines table, one object
  per ``(image_id, task)``::

      {"image_id": "img_001", "task": "probe", "probs": [0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]}
      {"image_id": "img_001", "task": "detect", "boxes": [{"x0": 0.2, "y0": 0.3, "x1": 0.5, "y1": 0.6, "score": 0.9}]}
      {"image_id": "img_001", "task": "ocr", "text": "2cm FN"}

* :class:`RemoteBackend` POSTs ``{task, image_id, width, height, pixels}`` to
  ``<endpoint>/v1/infer`` and expects ``{"probs": [...]}``, ``{"boxes": [...]}``
  or ``{"text": "..."}`` back.

Nothing a backend returns is trusted: every answer is re-validated against the
domain invariants before it leaves this module.
"""

from __future__ import annotations

import base64
import json
import logging
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

import requests

from .domain import PROBE_CLASS_COUNT, BBox, ProbVector
from .errors import (
    BackendUnavailable,
    ConfigError,
    DomainError,
    ProtocolError,
    UnknownImage,
)
from .regions import Raster

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 10.0
RETRY_BACKOFF = 0.5


class TaskId(str, Enum):
    SHAPE = "shape"
    MARGIN = "margin"
    ECHO = "echo"
    CATEGORY = "category"
    PROBE = "probe"
    DETECT = "detect"
    OCR = "ocr"

    @property
    def class_count(self) -> int | None:
        return _CLASS_COUNTS.get(self)

    @property
    def is_classification(self) -> bool:
        return self in _CLASS_COUNTS

    @classmethod
    def parse(cls, text: str) -> "TaskId":
        try:
            return cls(str(text).strip().lower())
        except ValueError:
            raise ConfigError(f"unknown task {text!r}; expected one of {[t.value for t in cls]}") from None

    def __str__(self) -> str:
        return self.value


_CLASS_COUNTS = {
    TaskId.SHAPE: 2,
    TaskId.MARGIN: 3,
    TaskId.ECHO: 3,
    TaskId.CATEGORY: 3,
    TaskId.PROBE: PROBE_CLASS_COUNT,
}

_ANSWER_KEY = {TaskId.DETECT: "boxes", TaskId.OCR: "text"}


def answer_key(task: TaskId) -> str:
    return _ANSWER_KEY.get(task, "probs")


def validate_probs(task: TaskId, raw: Any) -> ProbVector:
    if not isinstance(raw, list):
        raise ProtocolError(f"{task}: expected a list of probabilities, got {type(raw).__name__}")
    if len(raw) != task.class_count:
        raise ProtocolError(f"{task}: expected {task.class_count} probabilities, got {len(raw)}")
    try:
        return ProbVector(tuple(raw))
    except DomainError as exc:
        raise ProtocolError(f"{task}: {exc}") from None


def validate_boxes(raw: Any) -> list[BBox]:
    if not isinstance(raw, list):
        raise ProtocolError(f"detect: expected a list of boxes, got {type(raw).__name__}")
    boxes = []
    for item in raw:
        if not isinstance(item, dict):
            raise ProtocolError(f"detect: malformed box {item!r}")
        try:
            boxes.append(BBox.from_dict(item))
        except DomainError as exc:
            raise ProtocolError(f"detect: {exc}") from None
    return sorted(boxes, key=lambda b: -b.score)


def validate_text(raw: Any) -> str:
    if not isinstance(raw, str):
        raise ProtocolError(f"ocr: expected text, got {type(raw).__name__}")
    return raw.strip()


class Backend:
    """Validating front door; subclasses implement :meth:`_query`."""

    def _query(self, task: TaskId, image_id: str, region: Raster | None) -> Any:
        raise NotImplementedError

    def classify(self, task: TaskId, image_id: str, region: Raster | None = None) -> ProbVector:
        task = TaskId(task)
        if not task.is_classification:
            raise ValueError(f"{task} is not a classification task")
        return validate_probs(task, self._query(task, image_id, region))

    def detect(self, image_id: str, region: Raster | None = None) -> list[BBox]:
        return validate_boxes(self._query(TaskId.DETECT, image_id, region))

    def recognize_text(self, image_id: str, region: Raster | None = None) -> str:
        return validate_text(self._query(TaskId.OCR, image_id, region))


class FixtureBackend(Backend):
    """Read-only lookup table loaded from a JSON Lines file."""

    def __init__(self, table: dict[tuple[str, TaskId], Any], source: str = "<memory>") -> None:
        self._table = dict(table)
        self.source = source

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "FixtureBackend":
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read fixture file {path}: {exc}") from None
        table: dict[tuple[str, TaskId], Any] = {}
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                task = TaskId(entry["task"])
                key = (str(entry["image_id"]), task)
                value = entry[answer_key(task)]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: malformed fixture entry ({exc})") from None
            if key in table:
                raise ConfigError(f"{path}:{lineno}: duplicate entry for {key[0]}/{task}")
            try:
                _validate_answer(task, value)
            except ProtocolError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
            table[key] = value
        return cls(table, source=str(path))

    def _query(self, task: TaskId, image_id: str, region: Raster | None) -> Any:
        try:
            return self._table[(image_id, task)]
        except KeyError:
            raise UnknownImage(f"no fixture for image {image_id!r}, task {task}") from None


def _validate_answer(task: TaskId, value: Any) -> None:
    if task is TaskId.DETECT:
        validate_boxes(value)
    elif task is TaskId.OCR:
        validate_text(value)
    else:
        validate_probs(task, value)


class _Transient(Exception):
    pass


class RemoteBackend(Backend):
    """HTTP client for the ``/v1/infer`` protocol.

    Each attempt is bounded by ``timeout`` seconds; a transient failure
    (connection error, timeout, 5xx) is retried once after ``backoff``.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = DEFAULT_TIMEOUT,
        backoff: float = RETRY_BACKOFF,
        session: requests.Session | None = None,
    ) -> None:
        if not endpoint:
            raise ConfigError("remote backend requires an endpoint")
        self.url = endpoint.rstrip("/") + "/v1/infer"
        self.timeout = timeout
        self.backoff = backoff
        self._session = session or requests.Session()

    def _query(self, task: TaskId, image_id: str, region: Raster | None) -> Any:
        body = {
            "task": task.value,
            "image_id": image_id,
            "width": region.width if region is not None else 0,
            "height": region.height if region is not None else 0,
            "pixels": base64.b64encode(region.tobytes()).decode("ascii") if region is not None else "",
        }
        try:
            payload = self._post(body)
        except _Transient as exc:
            logger.warning("%s %s: %s; retrying in %.1fs", task, image_id, exc, self.backoff)
            time.sleep(self.backoff)
            try:
                payload = self._post(body)
            except _Transient as exc2:
                raise BackendUnavailable(f"{self.url}: {exc2}") from None
        key = answer_key(task)
        if not isinstance(payload, dict) or key not in payload:
            raise ProtocolError(f"{task}: response lacks {key!r}")
        return payload[key]

    def _post(self, body: dict) -> Any:
        try:
            resp = self._session.post(self.url, json=body, timeout=self.timeout)
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise _Transient(type(exc).__name__) from None
        if resp.status_code >= 500:
            raise _Transient(f"HTTP {resp.status_code}")
        if resp.status_code == 404:
            raise UnknownImage(f"{body['image_id']}: remote backend has no answer for {body['task']}")
        if resp.status_code != 200:
            raise ProtocolError(f"HTTP {resp.status_code} from {self.url}")
        try:
            return resp.json()
        except ValueError:
            raise ProtocolError(f"non-JSON response from {self.url}") from None


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str  # "fixture" | "remote"
    target: str
    timeout: float = DEFAULT_TIMEOUT

    @classmethod
    def parse(cls, spec: str, timeout: float = DEFAULT_TIMEOUT) -> "BackendDescriptor":
        """Parse ``fixture:<path>`` or ``remote:<url>``."""
        kind, sep, target = str(spec).partition(":")
        if not sep or kind not in ("fixture", "remote") or not target:
            raise ConfigError(f"backend must be fixture:<path> or remote:<url>, got {spec!r}")
        return cls(kind, target, timeout)

    def build(self) -> Backend:
        if self.kind == "fixture":
            if not Path(self.target).is_file():
                raise ConfigError(f"fixture file not readable: {self.target}")
            return FixtureBackend.from_jsonl(self.target)
        return RemoteBackend(self.target, timeout=self.timeout)

    def __str__(self) -> str:
        return f"{self.kind}:{self.target}"
