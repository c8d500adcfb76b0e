"""Rank-matched comparison adapters: plain LoRA and a tier-bucketed LoRA mixture."""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DimensionError
from .scale_types import HIGH_MID_BOUNDARY, MID_LOW_BOUNDARY

# log10 GSD bucket edges: high | mid | low
BUCKET_EDGES = (math.log10(HIGH_MID_BOUNDARY), math.log10(MID_LOW_BOUNDARY))


class LoRAAdapter:
    """Ungated low-rank update ``(lora_alpha/r) B A x``; the scale input is ignored."""

    kind = "lora"

    def __init__(self, d_in: int, d_out: int, r: int, lora_alpha: float | None = None,
                 rng: np.random.Generator | None = None, name: str = "adapter"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_in, self.d_out, self.r, self.name = d_in, d_out, r, name
        self.lora_alpha = r / 2 if lora_alpha is None else float(lora_alpha)
        bound = 1.0 / math.sqrt(d_in)
        self.B = Tensor(np.zeros((d_out, r)), requires_grad=True, name=f"{name}.B")
        self.A = Tensor(rng.uniform(-bound, bound, (r, d_in)), requires_grad=True, name=f"{name}.A")

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.r

    def parameters(self) -> dict[str, Tensor]:
        return {self.B.name: self.B, self.A.name: self.A}

    def update(self, x: Tensor, s: Tensor | None = None) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"{self.name}: input width {x.shape[-1]} != d_in {self.d_in}")
        u = dc.matmul(x, dc.transpose(self.A))
        return dc.scale(dc.matmul(u, dc.transpose(self.B)), self.scaling)

    def effective_magnitude(self) -> float:
        return self.scaling * float(np.linalg.norm(self.B.data @ self.A.data))

    def to_dict(self) -> dict:
        return {"type": self.kind, "d_in": self.d_in, "d_out": self.d_out, "r": self.r,
                "lora_alpha": self.lora_alpha, "B": self.B.data.tolist(), "A": self.A.data.tolist()}

    @classmethod
    def from_dict(cls, d: dict, name: str = "adapter") -> "LoRAAdapter":
        ad = cls(d["d_in"], d["d_out"], d["r"], d["lora_alpha"], name=name)
        ad.B.data = np.array(d["B"], dtype=np.float64).reshape(ad.d_out, ad.r)
        ad.A.data = np.array(d["A"], dtype=np.float64).reshape(ad.r, ad.d_in)
        return ad


def expert_ranks(r: int, k: int = 3) -> list[int]:
    """Split a total rank over k experts as evenly as possible."""
    base, extra = divmod(r, k)
    ranks = [base + (1 if i < extra else 0) for i in range(k)]
    if min(ranks) < 1:
        raise DimensionError(f"rank {r} too small for {k} experts")
    return ranks


def bucket_of(s: np.ndarray) -> np.ndarray:
    """Expert index per log-scale: 0 below log10 0.2, 1 below 0, else 2."""
    return np.searchsorted(np.array(BUCKET_EDGES), np.asarray(s, dtype=np.float64), side="right")


class BucketedMoEAdapter:
    """K=3 LoRA experts hard-routed by the GSD tier of each row's scale.

    Expert ranks sum to the gated adapter's rank, so the parameter count
    differs from it only by the thresholds and sharpness.
    """

    kind = "bucketed_moe"

    def __init__(self, d_in: int, d_out: int, r: int, lora_alpha: float | None = None,
                 rng: np.random.Generator | None = None, name: str = "adapter", ranks=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_in, self.d_out, self.r, self.name = d_in, d_out, r, name
        self.lora_alpha = r / 2 if lora_alpha is None else float(lora_alpha)
        self.ranks = list(ranks) if ranks is not None else expert_ranks(r)
        # every expert shares the gated adapter's alpha/r, so outputs are comparable
        self.experts = [LoRAAdapter(d_in, d_out, re, self.lora_alpha * re / r, rng=rng,
                                    name=f"{name}.expert{e}")
                        for e, re in enumerate(self.ranks)]

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for ex in self.experts:
            out.update(ex.parameters())
        return out

    def update(self, x: Tensor, s: Tensor) -> Tensor:
        route = bucket_of(s.data)
        total = None
        for e, ex in enumerate(self.experts):
            mask = (route == e).astype(np.float64)[:, None]
            part = dc.mul(ex.update(x), dc.constant(np.broadcast_to(mask, (x.shape[0], self.d_out))))
            total = part if total is None else dc.add(total, part)
        return total

    def effective_magnitude(self) -> float:
        return math.sqrt(sum(ex.effective_magnitude() ** 2 for ex in self.experts))

    def to_dict(self) -> dict:
        return {"type": self.kind, "d_in": self.d_in, "d_out": self.d_out, "r": self.r,
                "lora_alpha": self.lora_alpha, "ranks": self.ranks,
                "experts": [ex.to_dict() for ex in self.experts]}

    @classmethod
    def from_dict(cls, d: dict, name: str = "adapter") -> "BucketedMoEAdapter":
        ad = cls(d["d_in"], d["d_out"], d["r"], d["lora_alpha"], name=name, ranks=d["ranks"])
        ad.experts = [LoRAAdapter.from_dict(e, name=f"{name}.expert{i}")
                      for i, e in enumerate(d["experts"])]
        return ad
