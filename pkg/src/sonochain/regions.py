"""Rule-based splitting of an ultrasound frame into named regions.

Rectangles are normalized to the frame and come from a per-vendor layout
file, so a scanner with a different screen arrangement only needs a new
layout, not new code.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, InputError, SplitError

REGION_NAMES = ("main", "probe_mark", "ocr_strip")
MANDATORY_REGIONS = ("main", "probe_mark")

# Products like 0.2 * 480 land a hair off an integer; snap before floor/ceil.
_SNAP_DIGITS = 9

Rect = tuple[float, float, float, float]


@dataclass(frozen=True)
class LayoutConfig:
    layout_id: str
    regions: Mapping[str, Rect]

    @classmethod
    def from_dict(cls, data: Mapping) -> "LayoutConfig":
        if not isinstance(data, Mapping) or "regions" not in data:
            raise ConfigError("layout must be an object with 'layout_id' and 'regions'")
        regions = data["regions"]
        if not isinstance(regions, Mapping):
            raise ConfigError("layout 'regions' must be an object")
        layout = cls(
            layout_id=str(data.get("layout_id", "default")),
            regions={name: tuple(rect) if isinstance(rect, (list, tuple)) else rect for name, rect in regions.items()},
        )
        violations = validate_layout(layout)
        if violations:
            raise ConfigError(f"invalid layout {layout.layout_id!r}: " + "; ".join(violations))
        return layout

    def to_dict(self) -> dict:
        return {"layout_id": self.layout_id, "regions": {k: list(v) for k, v in self.regions.items()}}


def validate_layout(layout: LayoutConfig) -> list[str]:
    """Return every invariant violation; an empty list means the layout is valid."""
    violations = []
    for name in MANDATORY_REGIONS:
        if name not in layout.regions:
            violations.append(f"mandatory region absent: {name}")
    for name, rect in layout.regions.items():
        if name not in REGION_NAMES:
            violations.append(f"unknown region name: {name}")
        if not isinstance(rect, (list, tuple)) or len(rect) != 4:
            violations.append(f"region {name}: rectangle must have 4 coordinates, got {rect!r}")
            continue
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in rect):
            violations.append(f"region {name}: non-numeric coordinate in {list(rect)}")
            continue
        x0, y0, x1, y1 = rect
        if not all(0.0 <= v <= 1.0 for v in rect):
            violations.append(f"region {name}: coordinates outside [0, 1] in {list(rect)}")
        if not x0 < x1:
            violations.append(f"region {name}: x0 >= x1 in {list(rect)}")
        if not y0 < y1:
            violations.append(f"region {name}: y0 >= y1 in {list(rect)}")
    return violations


def load_layouts(path: str | Path) -> dict[str, LayoutConfig]:
    """Load one layout object, or a JSON list of them, keyed by layout id."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"layout file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"layout file {path} is not valid JSON: {exc}") from None
    items = data if isinstance(data, list) else [data]
    layouts: dict[str, LayoutConfig] = {}
    for item in items:
        layout = LayoutConfig.from_dict(item)
        if layout.layout_id in layouts:
            raise ConfigError(f"duplicate layout id {layout.layout_id!r} in {path}")
        layouts[layout.layout_id] = layout
    return layouts


@dataclass(frozen=True, eq=False)
class Raster:
    """A frame or crop. ``pixels`` is an (H, W) or (H, W, C) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.pixels.ndim not in (2, 3) or self.height < 1 or self.width < 1:
            raise InputError(f"raster must be a nonempty 2-D image, got shape {self.pixels.shape}")

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    def tobytes(self) -> bytes:
        return np.ascontiguousarray(self.pixels, dtype=np.uint8).tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Raster):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and self.tobytes() == other.tobytes()


def load_raster(path: str | Path) -> Raster:
    from PIL import Image

    try:
        with Image.open(path) as img:
            return Raster(np.asarray(img.convert("L") if img.mode not in ("L", "RGB") else img).copy())
    except FileNotFoundError:
        raise InputError(f"image not found: {path}") from None
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from None


def pixel_box(rect: Rect, width: int, height: int) -> tuple[int, int, int, int]:
    """Map a normalized rectangle to (x, y, w, h) pixels: floor origin, ceil extent,
    clamped to the frame. A side shorter than half a pixel counts as empty."""
    x0, y0, x1, y1 = rect
    x = math.floor(round(x0 * width, _SNAP_DIGITS))
    y = math.floor(round(y0 * height, _SNAP_DIGITS))
    ew = round((x1 - x0) * width, _SNAP_DIGITS)
    eh = round((y1 - y0) * height, _SNAP_DIGITS)
    w = math.ceil(ew) if ew >= 0.5 else 0
    h = math.ceil(eh) if eh >= 0.5 else 0
    x, y = min(x, width), min(y, height)
    return x, y, min(w, width - x), min(h, height - y)


def split(raster: Raster, layout: LayoutConfig) -> dict[str, Raster]:
    violations = validate_layout(layout)
    if violations:
        raise ConfigError(f"invalid layout {layout.layout_id!r}: " + "; ".join(violations))
    crops = {}
    for name in sorted(layout.regions, key=REGION_NAMES.index):
        x, y, w, h = pixel_box(layout.regions[name], raster.width, raster.height)
        if w <= 0 or h <= 0:
            raise SplitError(
                f"region {name} collapses to zero pixels on a {raster.width}x{raster.height} frame",
                region=name,
            )
        crops[name] = Raster(raster.pixels[y : y + h, x : x + w].copy())
    return crops
