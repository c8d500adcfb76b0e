"""Scale-conditioned low-rank adaptation on a synthetic GSD-layered task."""

from .cshlora import CSHLoRAAdapter, apply_adapted, init_tiers
from .resolver import ResolverConfig, SensorRegistry, resolve_inference
from .scale_types import Exact, Range, Tier, Unknown, assign_tier, to_log_scale
from .sseu import ScaleEstimate, SSEUHead

__all__ = ["CSHLoRAAdapter", "apply_adapted", "init_tiers", "ResolverConfig", "SensorRegistry",
           "resolve_inference", "Exact", "Range", "Tier", "Unknown", "assign_tier", "to_log_scale",
           "ScaleEstimate", "SSEUHead"]
