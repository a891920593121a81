"""Engine configuration and study manifests.

Configuration is resolved in three layers, later layers winning: the TOML
config file, ``SONOCHAIN_*`` environment variables, then command-line flags.

Example config file::

    backend = "fixture:fixtures.jsonl"
    planner = "rule"
    layout = "layout.json"
    out = "reports"
    workers = 4
    detection_cutoff = 0.5
    max_iterations = 8

    [thresholds]
    benign = 0.85
    malignant = 0.95

    [llm]
    endpoint = "http://localhost:8080/v1/chat"
    model = "gpt-3.5-turbo"

    [tools]
    enabled = ["probe_tool", "category_tool", "suspicious_description_tool"]
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .domain import ImageRecord, duplicate_ids
from .errors import ConfigError, InputError
from .inference import DEFAULT_TIMEOUT, BackendDescriptor
from .tools import BENIGN_THRESHOLD, DETECTION_CUTOFF, MALIGNANT_THRESHOLD, ToolRegistry

ENV_PREFIX = "SONOCHAIN_"
PLANNERS = ("rule", "llm")


@dataclass(frozen=True)
class EngineConfig:
    backend: str | None = None
    planner: str = "rule"
    layout: str | None = None
    out: str = "."
    workers: int = 4
    format: str = "markdown"
    benign_threshold: float = BENIGN_THRESHOLD
    malignant_threshold: float = MALIGNANT_THRESHOLD
    detection_cutoff: float = DETECTION_CUTOFF
    max_iterations: int = 8
    timeout: float = DEFAULT_TIMEOUT
    llm_endpoint: str | None = None
    llm_model: str | None = None
    tools: tuple[str, ...] | None = None
    tool_descriptions: Mapping[str, str] = field(default_factory=dict)

    def validate(self) -> "EngineConfig":
        for name in ("benign_threshold", "malignant_threshold"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        if not 0.0 <= self.detection_cutoff <= 1.0:
            raise ConfigError(f"detection_cutoff must lie in [0, 1], got {self.detection_cutoff}")
        if self.planner not in PLANNERS:
            raise ConfigError(f"planner must be one of {PLANNERS}, got {self.planner!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")
        if self.format not in ("markdown", "md", "json"):
            raise ConfigError(f"unknown format {self.format!r}; expected markdown or json")
        return self

    def backend_descriptor(self) -> BackendDescriptor:
        if not self.backend:
            raise ConfigError("no backend configured; pass --backend fixture:<path> or remote:<url>")
        return BackendDescriptor.parse(self.backend, timeout=self.timeout)

    def registry(self) -> ToolRegistry:
        registry = ToolRegistry()
        if self.tools is not None:
            registry = registry.subset(self.tools)
        unknown = sorted(set(self.tool_descriptions) - set(registry.names))
        if unknown:
            raise ConfigError(f"descriptions given for unknown tools: {unknown}")
        return registry.with_descriptions(self.tool_descriptions)

    def tool_settings(self) -> dict:
        return {
            "benign_threshold": self.benign_threshold,
            "malignant_threshold": self.malignant_threshold,
            "detection_cutoff": self.detection_cutoff,
        }


_KEYS = {f.name for f in fields(EngineConfig)}
_NUMERIC = {"workers": int, "max_iterations": int, "benign_threshold": float, "malignant_threshold": float,
            "detection_cutoff": float, "timeout": float}


def _coerce(name: str, value: Any) -> Any:
    cast = _NUMERIC.get(name)
    if cast is None or value is None:
        return value
    try:
        return cast(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None


def _flatten(data: Mapping[str, Any], source: str) -> dict:
    flat: dict[str, Any] = {}
    for key, value in data.items():
        if key == "thresholds" and isinstance(value, Mapping):
            for sub, v in value.items():
                flat[f"{sub}_threshold"] = v
        elif key == "llm" and isinstance(value, Mapping):
            for sub, v in value.items():
                flat[f"llm_{sub}"] = v
        elif key == "tools" and isinstance(value, Mapping):
            if "enabled" in value:
                flat["tools"] = tuple(value["enabled"])
            if "descriptions" in value:
                flat["tool_descriptions"] = dict(value["descriptions"])
        else:
            flat[key] = value
    unknown = sorted(set(flat) - set(_KEYS))
    if unknown:
        raise ConfigError(f"{source}: unknown config keys {unknown}")
    return flat


def _env_overrides(environ: Mapping[str, str]) -> dict:
    out = {}
    for name in ("backend", "planner", "layout", "out", "workers", "format", "benign_threshold",
                 "malignant_threshold", "detection_cutoff", "max_iterations", "timeout", "llm_endpoint", "llm_model"):
        key = ENV_PREFIX + name.upper()
        if key in environ:
            out[name] = environ[key]
    return out


def load_config(
    path: str | Path | None = None,
    flags: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> EngineConfig:
    """Resolve file < environment < flags; ``None`` flag values are ignored."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        values.update(_flatten(data, str(path)))
        base = Path(path).parent
        for key in ("layout",):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(base / values[key])
        if values.get("backend", "").startswith("fixture:"):
            target = values["backend"].split(":", 1)[1]
            if not Path(target).is_absolute():
                values["backend"] = f"fixture:{base / target}"
    values.update(_env_overrides(os.environ if environ is None else environ))
    values.update({k: v for k, v in (flags or {}).items() if v is not None})
    values = {k: _coerce(k, v) for k, v in values.items()}
    return replace(EngineConfig(), **values).validate()


@dataclass(frozen=True)
class StudyManifest:
    patient_id: str
    images: tuple[ImageRecord, ...]

    @classmethod
    def load(cls, path: str | Path) -> "StudyManifest":
        """Load ``{patient_id, images: [{image_id, path, layout_id}]}``;
        relative image paths resolve against the manifest's directory."""
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"manifest {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict) or "patient_id" not in data:
            raise InputError(f"manifest {path} lacks patient_id")
        entries = data.get("images") or []
        if not entries:
            raise InputError(f"manifest {path} lists no images")
        images = []
        for i, entry in enumerate(entries):
            try:
                image_path = Path(entry["path"])
                if not image_path.is_absolute():
                    image_path = path.parent / image_path
                images.append(
                    ImageRecord(
                        image_id=str(entry["image_id"]),
                        raster_ref=str(image_path),
                        layout_id=str(entry.get("layout_id", "default")),
                        patient_id=str(data["patient_id"]),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise InputError(f"manifest {path}: image entry {i} lacks {exc}") from None
        dupes = duplicate_ids(images)
        if dupes:
            raise InputError(f"manifest {path}: duplicate image ids {dupes}")
        return cls(str(data["patient_id"]), tuple(images))
