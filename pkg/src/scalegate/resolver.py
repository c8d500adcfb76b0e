"""Scale resolution at training time, at inference time, and from sensor metadata."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .scale_types import (Exact, Range, ScaleAnnotation, Unknown, annotation_from_json,
                          annotation_to_json, range_midpoint_log, to_log_scale)
from .sseu import ScaleEstimate


@dataclass(frozen=True)
class ResolverConfig:
    sigma_tau: float = 0.3
    g0: float = 1.0
    p_e2e: float = 0.2

    def __post_init__(self):
        if not self.sigma_tau > 0:
            raise ConfigError(f"sigma_tau must be positive, got {self.sigma_tau}")
        if not self.g0 > 0:
            raise ConfigError(f"g0 must be positive, got {self.g0}")
        if not 0.0 <= self.p_e2e <= 1.0:
            raise ConfigError(f"p_e2e must lie in [0, 1], got {self.p_e2e}")


class Branch(str, enum.Enum):
    META = "META"
    SSE = "SSE"
    FALLBACK = "FALLBACK"


def routes_to_sse(annotation: ScaleAnnotation, coin: float, p_e2e: float) -> bool:
    """Whether a training sample takes the scale head's mean as its gate input."""
    if isinstance(annotation, Exact):
        return coin < p_e2e
    return isinstance(annotation, Unknown)


def effective_scale_train(annotation: ScaleAnnotation, sse_mu: float, coin: float,
                          range_draw: float, p_e2e: float = 0.2) -> float:
    """Gate input for one training sample; the caller supplies both uniform draws."""
    if isinstance(annotation, Exact):
        return to_log_scale(annotation.value) if coin >= p_e2e else sse_mu
    if isinstance(annotation, Range):
        lo, hi = math.log10(annotation.lo), math.log10(annotation.hi)
        return lo + range_draw * (hi - lo)
    return sse_mu


def effective_scale_eval(annotation: ScaleAnnotation, sse_mu: float) -> float:
    if isinstance(annotation, Exact):
        return to_log_scale(annotation.value)
    if isinstance(annotation, Range):
        return range_midpoint_log(annotation.lo, annotation.hi)
    return sse_mu


def resolve_inference(g_meta: float | None, estimate: ScaleEstimate,
                      config: ResolverConfig = ResolverConfig()) -> tuple[float, Branch]:
    """Pick the GSD used at inference: metadata, a confident estimate, or the fallback.

    ``g_meta`` of None or <= 0 means no metadata.
    """
    if g_meta is not None and g_meta > 0:
        return float(g_meta), Branch.META
    if estimate.sigma < config.sigma_tau:
        return 10.0 ** estimate.mu, Branch.SSE
    return config.g0, Branch.FALLBACK


DEFAULT_REGISTRY = {"sentinel-2": Exact(10.0), "usgs-hro": Exact(0.15)}


@dataclass
class SensorRegistry:
    entries: dict[str, ScaleAnnotation] = field(default_factory=lambda: dict(DEFAULT_REGISTRY))

    def __post_init__(self):
        normalized = {}
        for tag, ann in self.entries.items():
            if not isinstance(ann, (Exact, Range)):
                raise ConfigError(f"registry entry {tag!r} must be exact or range, got {ann!r}")
            normalized[tag.strip().lower()] = ann
        self.entries = normalized

    def lookup(self, tag: str | None) -> ScaleAnnotation | None:
        if not tag:
            return None
        return self.entries.get(tag.strip().lower())

    def register(self, tag: str, annotation: ScaleAnnotation) -> None:
        if not isinstance(annotation, (Exact, Range)):
            raise ConfigError(f"registry entry {tag!r} must be exact or range")
        self.entries[tag.strip().lower()] = annotation

    @classmethod
    def load(cls, path: str | Path, with_defaults: bool = True) -> "SensorRegistry":
        """Read a JSON map tag -> annotation; file entries override the defaults."""
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read sensor registry {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"sensor registry {path} must be a JSON object")
        entries = dict(DEFAULT_REGISTRY) if with_defaults else {}
        for tag, obj in raw.items():
            try:
                entries[tag] = annotation_from_json(obj)
            except ValueError as exc:
                raise ConfigError(f"sensor registry {path}, entry {tag!r}: {exc}") from exc
        return cls(entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(
            {k: annotation_to_json(v) for k, v in sorted(self.entries.items())}, indent=2))


def parse_sensor_tag(metadata: dict) -> str | None:
    """Pull a sensor tag out of sample metadata.

    An explicit ``sensor`` field wins; otherwise the source string is tried as
    ``<sensor>/<rest>`` or a bare tag.
    """
    sensor = metadata.get("sensor")
    if isinstance(sensor, str) and sensor.strip():
        return sensor.strip()
    source = metadata.get("source")
    if isinstance(source, str) and source.strip():
        return source.strip().split("/", 1)[0]
    return None


def inject_gsd(metadata: dict, registry: SensorRegistry) -> ScaleAnnotation:
    """Metadata parse, registry lookup, then GSD assignment; unresolved samples are Unknown."""
    hit = registry.lookup(parse_sensor_tag(metadata))
    return hit if hit is not None else Unknown()
