"""Core vocabulary: probe positions, BI-RADS categories, lesion descriptors,
probability vectors, boxes and study records.

Class index order of every taxonomy is fixed here and is the contract used by
fixture files, wire messages and evaluation records.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable, Sequence

from .errors import DomainError, ParseError

# Bump when the accepted synonym set changes.
SYNONYM_TABLE_VERSION = "1"

PROB_TOLERANCE = 1e-6


class _Indexed(Enum):
    """Enum whose members have a stable class index (definition order)."""

    @classmethod
    def from_index(cls, index: int):
        members = list(cls)
        if isinstance(index, bool) or not 0 <= index < len(members):
            raise DomainError(f"{cls.__name__} index out of range: {index!r}")
        return members[index]

    @property
    def index(self) -> int:
        return list(type(self)).index(self)

    @classmethod
    def parse(cls, text: str):
        key = " ".join(str(text).split()).lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ParseError(f"unknown {cls.__name__.lower()} label: {text!r}", token=str(text))

    def __str__(self) -> str:
        return self.value


class Side(_Indexed):
    RIGHT = "right"
    LEFT = "left"


class Region(_Indexed):
    LYMPH_NODE = "lymph node"
    NIPPLE = "nipple"
    UIQ = "UIQ"
    UOQ = "UOQ"
    LOQ = "LOQ"
    LIQ = "LIQ"

    @property
    def long_form(self) -> str:
        return _REGION_LONG_FORMS.get(self, self.value)


_REGION_LONG_FORMS = {
    Region.UIQ: "Upper Inner Quadrant (UIQ)",
    Region.UOQ: "Upper Outer Quadrant (UOQ)",
    Region.LOQ: "Lower Outer Quadrant (LOQ)",
    Region.LIQ: "Lower Inner Quadrant (LIQ)",
}

# Normalized (lowercase, single-spaced) region phrase -> Region.
REGION_SYNONYMS: dict[str, Region] = {}
for _region in Region:
    REGION_SYNONYMS[_region.value.lower()] = _region
    REGION_SYNONYMS[_region.long_form.lower()] = _region
for _region, _long in _REGION_LONG_FORMS.items():
    REGION_SYNONYMS[_long.split(" (")[0].lower()] = _region
REGION_SYNONYMS.update(
    {
        "axillary lymph node": Region.LYMPH_NODE,
        "axilla": Region.LYMPH_NODE,
        "ln": Region.LYMPH_NODE,
    }
)


@dataclass(frozen=True, order=False)
class ProbePosition:
    side: Side
    region: Region

    @property
    def index(self) -> int:
        return self.side.index * len(Region) + self.region.index

    @classmethod
    def from_index(cls, index: int) -> "ProbePosition":
        if isinstance(index, bool) or not isinstance(index, int) or not 0 <= index < PROBE_CLASS_COUNT:
            raise DomainError(f"probe index out of range: {index!r}")
        side, region = divmod(index, len(Region))
        return cls(Side.from_index(side), Region.from_index(region))

    @property
    def label(self) -> str:
        return f"{self.side.value} {self.region.value}"

    @property
    def long_label(self) -> str:
        return f"{self.side.value} {self.region.long_form}"

    def __str__(self) -> str:
        return self.label


PROBE_CLASS_COUNT = len(Side) * len(Region)


def all_probe_positions() -> list[ProbePosition]:
    return [ProbePosition.from_index(i) for i in range(PROBE_CLASS_COUNT)]


def probe_label(index: int) -> str:
    """Canonical label of the probe class at ``index`` (0..11)."""
    return ProbePosition.from_index(index).label


def parse_probe_label(label: str) -> ProbePosition:
    """Inverse of :func:`probe_label`; also accepts long forms such as
    ``"right Lower Outer Quadrant (LOQ)"``. Case-insensitive."""
    words = str(label).split()
    if not words:
        raise ParseError("empty probe label", token="")
    side_token, rest = words[0], " ".join(words[1:]).lower()
    try:
        side = Side.parse(side_token)
    except ParseError:
        raise ParseError(f"unknown probe side {side_token!r} in {label!r}", token=side_token) from None
    region = REGION_SYNONYMS.get(rest)
    if region is None:
        raise ParseError(f"unknown probe region {rest!r} in {label!r}", token=rest)
    return ProbePosition(side, region)


class BiRadsCategory(IntEnum):
    C1 = 1
    C2 = 2
    C3 = 3
    C4 = 4
    C5 = 5

    @property
    def code(self) -> str:
        return self.name

    @property
    def meaning(self) -> str:
        return _CATEGORY_MEANINGS[self]

    @classmethod
    def parse(cls, text: str) -> "BiRadsCategory":
        key = str(text).strip().upper()
        try:
            return cls[key]
        except KeyError:
            raise ParseError(f"unknown BI-RADS category: {text!r}", token=str(text)) from None

    def __str__(self) -> str:
        return self.name


_CATEGORY_MEANINGS = {
    BiRadsCategory.C1: "negative",
    BiRadsCategory.C2: "benign",
    BiRadsCategory.C3: "probably benign",
    BiRadsCategory.C4: "suspicious for malignancy",
    BiRadsCategory.C5: "highly suggestive of malignancy",
}


def worst_category(categories: Iterable[BiRadsCategory]) -> BiRadsCategory:
    categories = list(categories)
    if not categories:
        raise DomainError("worst_category of an empty list")
    return max(categories)


class Shape(_Indexed):
    IRREGULAR = "irregular"
    OVAL = "oval"


class Margin(_Indexed):
    CIRCUMSCRIBED = "circumscribed"
    INDISTINCT = "indistinct"
    MICROLOBULATED = "microlobulated"


class Echo(_Indexed):
    ANECHOIC = "anechoic"
    ISOECHOIC = "isoechoic"
    HYPOECHOIC = "hypoechoic"


class CategoryClass(_Indexed):
    """Raw output classes of the category network."""

    BENIGN = "benign"
    MALIGNANT = "malignant"
    NORMAL = "normal"


def _check_unit(name: str, value: float) -> None:
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not 0.0 <= value <= 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {value!r}")


@dataclass(frozen=True)
class LesionDescription:
    shape: Shape
    margin: Margin
    echo: Echo
    # (shape, margin, echo) argmax probabilities
    confidences: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if len(self.confidences) != 3:
            raise DomainError("LesionDescription needs exactly three confidences")
        for name, value in zip(("shape", "margin", "echo"), self.confidences):
            _check_unit(f"{name} confidence", value)
        object.__setattr__(self, "confidences", tuple(float(c) for c in self.confidences))

    @property
    def sentence(self) -> str:
        return f"It appears {self.shape} shape, {self.margin} margin and {self.echo} echo."


@dataclass(frozen=True)
class ProbVector:
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        values = tuple(self.values)
        if not values:
            raise DomainError("empty probability vector")
        for v in values:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise DomainError(f"non-numeric probability: {v!r}")
            if v < 0:
                raise DomainError(f"negative probability: {v!r}")
        total = math.fsum(values)
        if abs(total - 1.0) > PROB_TOLERANCE:
            raise DomainError(f"probabilities sum to {total!r}, not 1")
        if abs(total - 1.0) > 1e-12:
            values = tuple(v / total for v in values)
        object.__setattr__(self, "values", tuple(float(v) for v in values))

    @classmethod
    def of(cls, values: Sequence[float], classes: int | None = None) -> "ProbVector":
        if classes is not None and len(values) != classes:
            raise DomainError(f"expected {classes} probabilities, got {len(values)}")
        return cls(tuple(values))

    def __len__(self) -> int:
        return len(self.values)

    def argmax(self) -> int:
        """Index of the largest entry; ties resolve to the lowest index."""
        best = 0
        for i, v in enumerate(self.values):
            if v > self.values[best]:
                best = i
        return best

    def top(self) -> tuple[int, float]:
        i = self.argmax()
        return i, self.values[i]


@dataclass(frozen=True)
class BBox:
    """Normalized box; coordinates and score in [0, 1]."""

    x0: float
    y0: float
    x1: float
    y1: float
    score: float = 1.0

    def __post_init__(self) -> None:
        for name in ("x0", "y0", "x1", "y1", "score"):
            _check_unit(name, getattr(self, name))
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise DomainError(f"degenerate box: {self.as_tuple()}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1, "score": self.score}

    @classmethod
    def from_dict(cls, data: dict) -> "BBox":
        try:
            return cls(data["x0"], data["y0"], data["x1"], data["y1"], data.get("score", 1.0))
        except (KeyError, TypeError) as exc:
            raise DomainError(f"malformed box: {data!r}") from exc


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    raster_ref: str
    layout_id: str = "default"
    patient_id: str = ""

    def __post_init__(self) -> None:
        if not self.image_id:
            raise DomainError("image_id must be nonempty")


@dataclass(frozen=True)
class ClinicalScore:
    value: int

    def __post_init__(self) -> None:
        if isinstance(self.value, bool) or not isinstance(self.value, int) or not 1 <= self.value <= 5:
            raise DomainError(f"clinical score must be an integer in [1, 5], got {self.value!r}")

    @classmethod
    def parse(cls, text) -> "ClinicalScore":
        if isinstance(text, int):
            return cls(text)
        token = str(text).strip()
        if not re.fullmatch(r"[+-]?\d+", token):
            raise DomainError(f"clinical score is not an integer: {text!r}")
        return cls(int(token))


def duplicate_ids(records: Iterable[ImageRecord]) -> list[str]:
    """Image ids appearing more than once."""
    seen: set[str] = set()
    dupes: list[str] = []
    for record in records:
        if record.image_id in seen and record.image_id not in dupes:
            dupes.append(record.image_id)
        seen.add(record.image_id)
    return dupes


__all__ = [
    "BBox",
    "BiRadsCategory",
    "CategoryClass",
    "ClinicalScore",
    "Echo",
    "ImageRecord",
    "LesionDescription",
    "Margin",
    "PROBE_CLASS_COUNT",
    "ProbePosition",
    "ProbVector",
    "Region",
    "Shape",
    "Side",
    "all_probe_positions",
    "parse_probe_label",
    "probe_label",
    "worst_category",
]
