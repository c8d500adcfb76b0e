"""Diagnostics on a frozen bundle: GSD spoofing, per-rank ridge probes, gate curves."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cshlora import TIER_NAMES, CSHLoRAAdapter
from .errors import ConfigError, ContractError

FACTOR_NAMES = ("texture", "geometry", "semantic")


def spoof_grid(lo: float = 0.01, hi: float = 30.0, n: int = 13) -> np.ndarray:
    if not (0 < lo < hi) or n < 2:
        raise ConfigError(f"spoof grid needs 0 < lo < hi and n >= 2, got ({lo}, {hi}, {n})")
    return np.geomspace(lo, hi, n)


def bootstrap_interval(correct: np.ndarray, n_boot: int = 1000, seed: int = 0,
                       level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of a 0/1 vector."""
    correct = np.asarray(correct, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = correct.size
    means = np.empty(n_boot)
    for i in range(0, n_boot, 100):
        k = min(100, n_boot - i)
        means[i:i + k] = correct[rng.integers(0, n, size=(k, n))].mean(axis=1)
    alpha = (1.0 - level) / 2
    lo, hi = np.quantile(means, [alpha, 1 - alpha])
    return float(lo), float(hi)


@dataclass
class SpoofReport:
    variant: str
    true_g: float
    grid: np.ndarray
    accuracy: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.ci_hi - self.ci_lo)

    @property
    def peak_g(self) -> float:
        return float(self.grid[int(np.argmax(self.accuracy))])

    def rows(self):
        for g, a, lo, hi in zip(self.grid, self.accuracy, self.ci_lo, self.ci_hi):
            yield {"g": float(g), "acc": float(a), "ci_lo": float(lo), "ci_hi": float(hi),
                   "variant": self.variant}


def spoof_accuracy(bundle, features: np.ndarray, labels: np.ndarray, g: float) -> np.ndarray:
    """Per-sample correctness with every gate driven by the spoofed GSD ``g``."""
    s = np.full(len(features), math.log10(g))
    return bundle.predict(features, s) == labels


def spoof_sweep(bundle, features: np.ndarray, labels: np.ndarray, true_g: float,
                grid: Sequence[float] | None = None, n_boot: int = 1000, seed: int = 0,
                variant: str | None = None) -> SpoofReport:
    """Accuracy with the scale input overridden by each grid value; images and labels fixed."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(features) == 0:
        raise ContractError("spoof sweep on an empty test set")
    grid = spoof_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) <= 0):
        raise ConfigError("spoof grid must be strictly increasing")
    acc, lo, hi = [], [], []
    for i, g in enumerate(grid):
        correct = spoof_accuracy(bundle, features, labels, g)
        acc.append(correct.mean())
        a, b = bootstrap_interval(correct, n_boot, seed=seed + i)
        lo.append(a)
        hi.append(b)
    return SpoofReport(variant or bundle.variant, float(true_g), grid, np.array(acc),
                       np.array(lo), np.array(hi))


def write_spoof_csv(reports: Sequence[SpoofReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["g", "acc", "ci_lo", "ci_hi", "variant"])
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# --- ridge probe --------------------------------------------------------------

def ridge_r2_cv(x: np.ndarray, y: np.ndarray, ridge: float = 1e-3, n_folds: int = 5,
                seed: int = 0) -> float:
    """Held-out R^2 of a scalar ridge regression y ~ a + b x, floored at 0.

    The regressor is standardized on each training fold, so the score is
    unchanged by affine rescaling of ``x``. Constant ``x`` or ``y`` gives 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if np.ptp(y) == 0 or np.ptp(x) == 0:
        return 0.0
    folds = np.array_split(np.random.default_rng(seed).permutation(n), n_folds)
    pred = np.empty(n)
    for k, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != k])
        xt, yt = x[train], y[train]
        mx, sx = xt.mean(), xt.std()
        if sx == 0:
            pred[test] = yt.mean()
            continue
        zt = (xt - mx) / sx
        beta = float(zt @ (yt - yt.mean())) / (float(zt @ zt) + ridge)
        pred[test] = yt.mean() + beta * (x[test] - mx) / sx
    sst = float(np.sum((y - y.mean()) ** 2))
    return max(0.0, 1.0 - float(np.sum((y - pred) ** 2)) / sst)


@dataclass
class ProbeReport:
    r2: np.ndarray  # (rank, factor)
    layout: tuple[tuple[int, int], ...]
    tau: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tau_init: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def tier_means(self) -> np.ndarray:
        """Mean R^2 per (tier, factor), shape (3, 3)."""
        return np.array([self.r2[a:b].mean(axis=0) for a, b in self.layout])

    def matched_mean(self) -> float:
        return float(np.mean(np.diag(self.tier_means())))

    def mismatched_mean(self) -> float:
        tm = self.tier_means()
        return float(tm[~np.eye(3, dtype=bool)].mean())

    def tau_drift(self) -> np.ndarray:
        return self.tau - self.tau_init if self.tau.size else np.zeros(0)

    def rows(self):
        for k in range(self.r2.shape[0]):
            tier = next(n for n, (a, b) in zip(TIER_NAMES, self.layout) if a <= k < b)
            for f, fname in enumerate(FACTOR_NAMES):
                yield {"rank": k, "tier": tier, "factor": fname, "r2": float(self.r2[k, f])}


def tau_probe(bundle, features: np.ndarray, s: np.ndarray, factors: np.ndarray,
              ridge: float = 1e-3, n_folds: int = 5, seed: int = 0) -> ProbeReport:
    """Per-rank scalar ridge probes from the first-layer gated latent to each factor."""
    features = np.asarray(features, dtype=np.float64)
    if len(features) < 100:
        raise ContractError(f"probe needs at least 100 samples, got {len(features)}")
    latent = bundle.bottleneck(features, np.asarray(s, dtype=np.float64))
    factors = np.asarray(factors, dtype=np.float64)
    r = latent.shape[1]
    r2 = np.array([[ridge_r2_cv(latent[:, k], factors[:, f], ridge, n_folds, seed)
                    for f in range(factors.shape[1])] for k in range(r)])
    ad0: CSHLoRAAdapter = bundle.adapters[0]
    init = CSHLoRAAdapter(ad0.d_in, ad0.d_out, ad0.r, layout=ad0.layout).tau.data
    return ProbeReport(r2, ad0.layout, ad0.tau.data.copy(), init)


def write_probe_csv(report: ProbeReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["rank", "tier", "factor", "r2"])
        w.writeheader()
        for row in report.rows():
            row["r2"] = repr(row["r2"])
            w.writerow(row)


# --- gate curves --------------------------------------------------------------

@dataclass
class GateCurve:
    s: np.ndarray
    curves: dict[str, np.ndarray]


def export_gate_curves(adapter: CSHLoRAAdapter, s_grid: np.ndarray | None = None,
                       path: str | Path | None = None) -> GateCurve:
    """Tier-averaged gate value over a log-scale grid, optionally written as CSV."""
    s_grid = np.linspace(-2.0, 2.0, 200) if s_grid is None else np.asarray(s_grid, dtype=np.float64)
    h = adapter.gates(s_grid)
    curves = {name: h[:, a:b].mean(axis=1) for name, (a, b) in zip(TIER_NAMES, adapter.layout)}
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s"] + [f"h_{n}" for n in TIER_NAMES])
            for i, sv in enumerate(s_grid):
                w.writerow([repr(float(sv))] + [repr(float(curves[n][i])) for n in TIER_NAMES])
    return GateCurve(s_grid, curves)
