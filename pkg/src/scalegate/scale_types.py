"""Ground-sampling-distance (GSD) annotations and tiering.

GSD values are meters per pixel; the log scale ``s = log10(g)`` is what the
adapter gates consume.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Union

from .errors import DomainError, NoTierError

HIGH_MID_BOUNDARY = 0.2
MID_LOW_BOUNDARY = 1.0


class Tier(enum.IntEnum):
    HIGH = 0
    MID = 1
    LOW = 2


@dataclass(frozen=True)
class Exact:
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value > 0):
            raise DomainError(f"exact GSD must be finite and positive, got {self.value}")


@dataclass(frozen=True)
class Range:
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and 0 < self.lo <= self.hi):
            raise DomainError(f"GSD range needs 0 < lo <= hi, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class Unknown:
    pass


ScaleAnnotation = Union[Exact, Range, Unknown]


def to_log_scale(g: float) -> float:
    if not g > 0:
        raise DomainError(f"GSD must be positive, got {g}")
    return math.log10(g)


def range_midpoint_log(lo: float, hi: float) -> float:
    """Log of the geometric mean of ``[lo, hi]``."""
    if not (0 < lo <= hi):
        raise DomainError(f"GSD range needs 0 < lo <= hi, got [{lo}, {hi}]")
    return 0.5 * (math.log10(lo) + math.log10(hi))


def tier_of_gsd(g: float) -> Tier:
    if not g > 0:
        raise DomainError(f"GSD must be positive, got {g}")
    if g < HIGH_MID_BOUNDARY:
        return Tier.HIGH
    if g < MID_LOW_BOUNDARY:
        return Tier.MID
    return Tier.LOW


def tier_of_log_scale(s: float) -> Tier:
    return tier_of_gsd(10.0 ** s)


def assign_tier(annotation: ScaleAnnotation) -> Tier:
    if isinstance(annotation, Exact):
        return tier_of_gsd(annotation.value)
    if isinstance(annotation, Range):
        return tier_of_log_scale(range_midpoint_log(annotation.lo, annotation.hi))
    raise NoTierError("unknown-scale samples have no tier until the scale head estimates one")


def annotation_to_json(annotation: ScaleAnnotation) -> dict:
    if isinstance(annotation, Exact):
        return {"kind": "exact", "value": annotation.value}
    if isinstance(annotation, Range):
        return {"kind": "range", "lo": annotation.lo, "hi": annotation.hi}
    if isinstance(annotation, Unknown):
        return {"kind": "unknown"}
    raise TypeError(f"not a scale annotation: {annotation!r}")


def annotation_from_json(obj) -> ScaleAnnotation:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise DomainError(f"malformed scale annotation: {obj!r}")
    kind = obj["kind"]
    try:
        if kind == "exact":
            return Exact(float(obj["value"]))
        if kind == "range":
            return Range(float(obj["lo"]), float(obj["hi"]))
    except (KeyError, TypeError) as exc:
        raise DomainError(f"malformed {kind} annotation: {obj!r}") from exc
    if kind == "unknown":
        return Unknown()
    raise DomainError(f"unknown annotation kind {kind!r}")
