"""Heteroscedastic scale head: mean and log-variance of log10 GSD."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractError, DimensionError, DomainError

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 4.0
HIDDEN = 64


@dataclass(frozen=True)
class ScaleEstimate:
    mu: float
    log_var: float

    def __post_init__(self):
        if not (LOG_VAR_MIN <= self.log_var <= LOG_VAR_MAX) or not math.isfinite(self.mu):
            raise DomainError(f"invalid estimate mu={self.mu}, log_var={self.log_var}")

    @classmethod
    def from_sigma(cls, mu: float, sigma: float) -> "ScaleEstimate":
        return cls(mu, 2.0 * math.log(sigma))

    @property
    def sigma(self) -> float:
        return math.exp(0.5 * self.log_var)


class SSEUHead:
    """LayerNorm -> linear trunk -> GELU, then separate mean and log-variance heads."""

    def __init__(self, d_feat: int, hidden: int = HIDDEN, rng: np.random.Generator | None = None,
                 name: str = "sseu"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_feat, self.hidden, self.name = d_feat, hidden, name
        self.ln_gain = Tensor(np.ones(d_feat), requires_grad=True, name=f"{name}.ln_gain")
        self.ln_bias = Tensor(np.zeros(d_feat), requires_grad=True, name=f"{name}.ln_bias")
        self.W = Tensor(rng.normal(0, 1 / math.sqrt(d_feat), (hidden, d_feat)),
                        requires_grad=True, name=f"{name}.W")
        self.W_mu = Tensor(rng.normal(0, 1 / math.sqrt(hidden), (1, hidden)),
                           requires_grad=True, name=f"{name}.W_mu")
        self.W_sigma = Tensor(np.zeros((1, hidden)), requires_grad=True, name=f"{name}.W_sigma")

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.ln_gain, self.ln_bias, self.W, self.W_mu, self.W_sigma)}

    def forward(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        """Batched (mu, log_var), each of shape (m,), for feature rows (m, d_feat)."""
        if feats.shape[-1] != self.d_feat:
            raise DimensionError(f"scale head expects {self.d_feat} features, got {feats.shape[-1]}")
        m = feats.shape[0]
        z = dc.gelu(dc.matmul(dc.layer_norm(feats, self.ln_gain, self.ln_bias), dc.transpose(self.W)))
        mu = dc.reshape(dc.matmul(z, dc.transpose(self.W_mu)), (m,))
        raw = dc.reshape(dc.matmul(z, dc.transpose(self.W_sigma)), (m,))
        return mu, dc.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)

    def predict(self, pooled: np.ndarray) -> ScaleEstimate:
        pooled = np.asarray(pooled, dtype=np.float64)
        if not np.all(np.isfinite(pooled)):
            raise DomainError("pooled features contain non-finite values")
        mu, lv = self.forward(dc.constant(pooled.reshape(1, -1)))
        return ScaleEstimate(float(mu.data[0]), float(lv.data[0]))

    def predict_batch(self, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        feats = np.asarray(feats, dtype=np.float64)
        if not np.all(np.isfinite(feats)):
            raise DomainError("features contain non-finite values")
        mu, lv = self.forward(dc.constant(feats))
        return mu.data.copy(), lv.data.copy()

    def to_dict(self) -> dict:
        return {k.split(".", 1)[1]: t.data.tolist() for k, t in self.parameters().items()} | {
            "d_feat": self.d_feat, "hidden": self.hidden}

    @classmethod
    def from_dict(cls, d: dict, name: str = "sseu") -> "SSEUHead":
        head = cls(d["d_feat"], d["hidden"], name=name)
        for key, t in head.parameters().items():
            t.data = np.array(d[key.split(".", 1)[1]], dtype=np.float64).reshape(t.shape)
        return head


def clamp_log_var(raw: float) -> float:
    return min(max(raw, LOG_VAR_MIN), LOG_VAR_MAX)


def nll(estimate: ScaleEstimate | Sequence[ScaleEstimate], s_true) -> float:
    """Gaussian negative log-likelihood averaged over the given estimates."""
    ests = [estimate] if isinstance(estimate, ScaleEstimate) else list(estimate)
    truths = np.atleast_1d(np.asarray(s_true, dtype=np.float64))
    if len(ests) != truths.size:
        raise ContractError(f"{len(ests)} estimates for {truths.size} targets")
    if not len(ests):
        return 0.0
    mu = np.array([e.mu for e in ests])
    lv = np.array([e.log_var for e in ests])
    return float(np.mean(0.5 * (truths - mu) ** 2 / np.exp(lv) + 0.5 * lv))


def calibration_ratio(mu, sigma, truths) -> float:
    """Mean absolute error of ``mu`` over mean predicted sigma (log10 units)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if mu.size == 0:
        raise ContractError("calibration ratio of an empty set")
    if not (mu.shape == sigma.shape == truths.shape):
        raise ContractError(f"length mismatch: {mu.shape}, {sigma.shape}, {truths.shape}")
    return float(np.mean(np.abs(mu - truths)) / np.mean(sigma))


def calibration_ratio_of(estimates: Sequence[ScaleEstimate], truths) -> float:
    return calibration_ratio([e.mu for e in estimates], [e.sigma for e in estimates], truths)
