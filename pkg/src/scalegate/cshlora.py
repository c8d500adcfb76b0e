"""Scale-gated low-rank adapter.

The update is ``(lora_alpha / r) * B @ diag(h(s)) @ A`` with per-rank gates
``h_k(s) = sigmoid(alpha * (tau_k - s))``. Ranks are grouped into three tiers
(object, structure, semantic) whose thresholds start at log10 GSD 0, 1 and 4,
so coarser imagery progressively switches off the fine-scale ranks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DimensionError, DomainError

TIER_NAMES = ("object", "structure", "semantic")
# rank split of the 64-rank layout: 0-10 / 11-31 / 32-63
TIER_FRACTIONS = (11 / 64, 21 / 64, 32 / 64)
TIER_TAU = (0.0, 1.0, 4.0)
SHARPNESS_INIT = 5.0


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def tier_layout(r: int, fractions=TIER_FRACTIONS) -> tuple[tuple[int, int], ...]:
    """Rank intervals ``[start, stop)`` for the three tiers.

    Cut points are the rounded cumulative fractions, nudged so every tier keeps
    at least one rank.
    """
    if r < 3:
        raise DomainError(f"rank {r} cannot hold three non-empty tiers")
    total = sum(fractions)
    c1 = _round_half_up(r * fractions[0] / total)
    c2 = _round_half_up(r * (fractions[0] + fractions[1]) / total)
    c1 = min(max(c1, 1), r - 2)
    c2 = min(max(c2, c1 + 1), r - 1)
    return ((0, c1), (c1, c2), (c2, r))


@dataclass(frozen=True)
class GateVector:
    h: np.ndarray
    s: float


class CSHLoRAAdapter:
    """Low-rank pair (B, A) with learnable thresholds and sharpness.

    Sharpness is stored as ``log_sharpness`` so it stays positive without any
    projection step.
    """

    def __init__(self, d_in: int, d_out: int, r: int, lora_alpha: float | None = None,
                 rng: np.random.Generator | None = None, layout=None, name: str = "adapter"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_in, self.d_out, self.r = d_in, d_out, r
        self.lora_alpha = r / 2 if lora_alpha is None else float(lora_alpha)
        self.layout = tuple(tuple(iv) for iv in (layout or tier_layout(r)))
        tau = np.empty(r)
        for (start, stop), t in zip(self.layout, TIER_TAU):
            tau[start:stop] = t
        bound = 1.0 / math.sqrt(d_in)
        self.name = name
        self.B = Tensor(np.zeros((d_out, r)), requires_grad=True, name=f"{name}.B")
        self.A = Tensor(rng.uniform(-bound, bound, (r, d_in)), requires_grad=True, name=f"{name}.A")
        self.tau = Tensor(tau, requires_grad=True, name=f"{name}.tau")
        self.log_sharpness = Tensor(np.array([math.log(SHARPNESS_INIT)]), requires_grad=True,
                                    name=f"{name}.log_sharpness")

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.r

    @property
    def sharpness(self) -> float:
        return float(np.exp(self.log_sharpness.data[0]))

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.B, self.A, self.tau, self.log_sharpness)}

    def tier_slices(self) -> dict[str, slice]:
        return {n: slice(a, b) for n, (a, b) in zip(TIER_NAMES, self.layout)}

    # numpy-side evaluation, no graph

    def gate(self, s: float) -> GateVector:
        if not math.isfinite(s):
            raise DomainError(f"log-scale must be finite, got {s}")
        h = dc._sigmoid(self.sharpness * (self.tau.data - s))
        return GateVector(h=h, s=float(s))

    def gates(self, s: np.ndarray) -> np.ndarray:
        """Gate matrix (len(s), r) for a vector of log-scales."""
        s = np.asarray(s, dtype=np.float64)
        return dc._sigmoid(self.sharpness * (self.tau.data[None, :] - s[:, None]))

    def delta_w(self, s: float) -> np.ndarray:
        h = self.gate(s).h
        return self.scaling * (self.B.data * h) @ self.A.data

    def effective_magnitude(self) -> float:
        """(lora_alpha/r) * sqrt(tr(B^T B A A^T)), i.e. the scaled Frobenius norm of BA."""
        btb = self.B.data.T @ self.B.data
        aat = self.A.data @ self.A.data.T
        return self.scaling * math.sqrt(max(float(np.sum(btb * aat)), 0.0))

    # graph-building forward

    def gate_tensor(self, s: Tensor) -> Tensor:
        return dc.sigmoid(dc.scalar_mul(dc.outer_diff(self.tau, s), dc.exp(self.log_sharpness)))

    def latent(self, x: Tensor, s: Tensor) -> Tensor:
        """Gated bottleneck ``h(s) * (A x)`` for a batch of rows, shape (m, r)."""
        return dc.mul(self.gate_tensor(s), dc.matmul(x, dc.transpose(self.A)))

    def update(self, x: Tensor, s: Tensor) -> Tensor:
        """Adapter contribution ``delta_w(s) @ x`` for each row of x, shape (m, d_out)."""
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"{self.name}: input width {x.shape[-1]} != d_in {self.d_in}")
        return dc.scale(dc.matmul(self.latent(x, s), dc.transpose(self.B)), self.scaling)

    # persistence

    def to_dict(self) -> dict:
        return {
            "type": "cs_hlora",
            "d_in": self.d_in, "d_out": self.d_out, "r": self.r,
            "lora_alpha": self.lora_alpha,
            "tier_layout": [list(iv) for iv in self.layout],
            "B": self.B.data.tolist(), "A": self.A.data.tolist(),
            "tau": self.tau.data.tolist(),
            "log_sharpness": float(self.log_sharpness.data[0]),
        }

    @classmethod
    def from_dict(cls, d: dict, name: str = "adapter") -> "CSHLoRAAdapter":
        ad = cls(d["d_in"], d["d_out"], d["r"], d["lora_alpha"], layout=d["tier_layout"], name=name)
        ad.B.data = np.array(d["B"], dtype=np.float64).reshape(ad.d_out, ad.r)
        ad.A.data = np.array(d["A"], dtype=np.float64).reshape(ad.r, ad.d_in)
        ad.tau.data = np.array(d["tau"], dtype=np.float64).reshape(ad.r)
        ad.log_sharpness.data = np.array([d["log_sharpness"]], dtype=np.float64)
        return ad


def init_tiers(r: int, d_in: int = 1, d_out: int = 1, lora_alpha: float | None = None,
               seed: int = 0) -> CSHLoRAAdapter:
    """Fresh adapter with the tiered threshold layout and sharpness 5."""
    return CSHLoRAAdapter(d_in, d_out, r, lora_alpha, rng=np.random.default_rng(seed))


def apply_adapted(frozen_w: Tensor, adapter: CSHLoRAAdapter, s: Tensor, x: Tensor) -> Tensor:
    """Frozen linear map plus the gated update: ``W x + delta_w(s) x``.

    ``x`` is (m, d_in) with ``s`` of length m, or a single vector (d_in,) with a
    one-element ``s``.
    """
    single = x.data.ndim == 1
    if frozen_w.shape != (adapter.d_out, adapter.d_in):
        raise DimensionError(f"frozen weight {frozen_w.shape} does not match adapter "
                             f"({adapter.d_out}, {adapter.d_in})")
    if x.shape[-1] != adapter.d_in:
        raise DimensionError(f"input {x.shape} does not match d_in {adapter.d_in}")
    xb = dc.reshape(x, (1, adapter.d_in)) if single else x
    sb = dc.reshape(s, (1,)) if single else s
    out = dc.add(dc.matmul(xb, dc.transpose(frozen_w)), adapter.update(xb, sb))
    return dc.reshape(out, (adapter.d_out,)) if single else out
