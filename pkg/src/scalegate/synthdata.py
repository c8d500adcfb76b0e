"""Synthetic scale-layered corpus, a quota-enforcing batch sampler, and JSONL I/O.

Each feature vector holds three equal blocks standing in for texture, geometry
and semantic evidence. Every block carries one scalar signal ``z_b`` along a
fixed carrier direction (plus orthogonal distractor noise). The label is a
quantile bin of ``t = sum_b w_b(s) z_b`` where the block weights are built
from the same sigmoid gates the adapter uses at its initial thresholds:

    w_texture  = sig(5 (0 - s))
    w_geometry = sig(5 (1 - s)) - sig(5 (0 - s))
    w_semantic = 1 - sig(5 (1 - s))

Fine-scale labels therefore depend on the texture block and coarse-scale
labels on the semantic block. The last two coordinates carry a noisy copy of
``s``; the difference of the two copies exposes the noise level.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Iterator, Sequence

import numpy as np

from .diffcore import _sigmoid
from .errors import ConfigError, LoadError, SamplerError
from .scale_types import (Exact, Range, ScaleAnnotation, Tier, Unknown, annotation_from_json,
                          annotation_to_json, assign_tier)

S_RANGE = (-1.5, 1.3)
ANNOTATION_MIX = (0.5, 0.25, 0.25)
LABEL_SHARPNESS = 5.0
LABEL_TAU = (0.0, 1.0)
SIGNAL_AMP = 2.0
T_SCALE = 0.85
N_CUE = 2


@dataclass
class Sample:
    id: str
    features: np.ndarray
    label: int
    scale: ScaleAnnotation
    sensor: str | None = None
    source: str = "synthetic"

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.id == other.id and self.label == other.label and self.scale == other.scale
                and self.sensor == other.sensor and self.source == other.source
                and np.array_equal(self.features, other.features))

    def to_json(self) -> dict:
        return {"id": self.id, "features": self.features.tolist(), "label": int(self.label),
                "gsd": annotation_to_json(self.scale), "sensor": self.sensor, "source": self.source}


@dataclass
class SyntheticCorpus:
    """Generated samples plus the generator-side truth the JSONL schema omits."""

    samples: list[Sample]
    true_s: np.ndarray
    signals: np.ndarray  # (n, 3) block signals z
    ambiguous: np.ndarray
    n_classes: int

    def features(self) -> np.ndarray:
        return np.stack([x.features for x in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([x.label for x in self.samples])

    def subset(self, idx) -> "SyntheticCorpus":
        idx = np.asarray(idx)
        return SyntheticCorpus([self.samples[i] for i in idx], self.true_s[idx],
                               self.signals[idx], self.ambiguous[idx], self.n_classes)

    def __len__(self):
        return len(self.samples)


def block_weights(s) -> np.ndarray:
    """Label mixture weights (n, 3) for texture / geometry / semantic blocks."""
    s = np.asarray(s, dtype=np.float64)
    g_obj = _sigmoid(LABEL_SHARPNESS * (LABEL_TAU[0] - s))
    g_str = _sigmoid(LABEL_SHARPNESS * (LABEL_TAU[1] - s))
    return np.stack([g_obj, g_str - g_obj, 1.0 - g_str], axis=-1)


def block_slices(d: int) -> tuple[slice, slice, slice]:
    """Carrier coordinates of each block; the semantic block excludes the cue slots."""
    m = d // 3
    return slice(0, m), slice(m, 2 * m), slice(2 * m, d - N_CUE)


def cue_slice(d: int) -> slice:
    return slice(d - N_CUE, d)


def class_thresholds(n_classes: int) -> np.ndarray:
    nd = NormalDist(0.0, T_SCALE)
    return np.array([nd.inv_cdf(j / n_classes) for j in range(1, n_classes)])


def block_factors(features) -> np.ndarray:
    """Recover the per-block signals (n, 3) from features by carrier projection."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    out = np.empty((x.shape[0], 3))
    for b, sl in enumerate(block_slices(x.shape[1])):
        width = sl.stop - sl.start
        out[:, b] = x[:, sl].sum(axis=1) / (math.sqrt(width) * SIGNAL_AMP)
    return out


def label_from_signals(signals, s, n_classes: int) -> np.ndarray:
    t = np.sum(block_weights(s) * np.atleast_2d(signals), axis=-1)
    return np.searchsorted(class_thresholds(n_classes), t)


def oracle_predict(features, s, n_classes: int, block: int | Sequence[int] | None = None) -> np.ndarray:
    """Generator-side oracle.

    With ``block=None`` the full weighted rule is applied at the given scales.
    With a block index (scalar or per-sample array) only that block's signal is
    binned, as a classifier that reads a single block would.
    """
    z = block_factors(features)
    if block is None:
        return label_from_signals(z, s, n_classes)
    blk = np.broadcast_to(np.asarray(block), (z.shape[0],))
    picked = z[np.arange(z.shape[0]), blk]
    return np.searchsorted(class_thresholds(n_classes), picked * T_SCALE)


def _validate_dims(n: int, d: int, n_classes: int) -> None:
    if n <= 0:
        raise ConfigError(f"n must be positive, got {n}")
    if d < 12 or d % 3:
        raise ConfigError(f"d must be >= 12 and divisible by 3, got {d}")
    if n_classes < 2:
        raise ConfigError(f"need at least two classes, got {n_classes}")


def generate_corpus(seed: int, n: int, d: int = 33, n_classes: int = 4, noise: float = 0.35,
                    ambiguous_frac: float = 0.1, ambiguous_mult: float = 5.0,
                    mix: Sequence[float] = ANNOTATION_MIX, fixed_g: float | None = None,
                    id_prefix: str = "syn") -> SyntheticCorpus:
    _validate_dims(n, d, n_classes)
    if noise < 0 or not 0 <= ambiguous_frac <= 1:
        raise ConfigError("noise must be >= 0 and ambiguous_frac within [0, 1]")
    mix = np.asarray(mix, dtype=np.float64)
    if mix.shape != (3,) or np.any(mix < 0) or not np.isclose(mix.sum(), 1.0):
        raise ConfigError(f"annotation mix must be three non-negative weights summing to 1, got {mix}")
    rng = np.random.default_rng(seed)

    if fixed_g is None:
        s = rng.uniform(*S_RANGE, size=n)
    else:
        s = np.full(n, math.log10(fixed_g))
    z = rng.standard_normal((n, 3))
    x = np.zeros((n, d))
    for b, sl in enumerate(block_slices(d)):
        width = sl.stop - sl.start
        carrier = np.full(width, 1.0 / math.sqrt(width))
        eps = rng.standard_normal((n, width))
        eps -= np.outer(eps @ carrier, carrier)
        x[:, sl] = eps + SIGNAL_AMP * z[:, b:b + 1] * carrier
    ambiguous = rng.random(n) < ambiguous_frac
    cue_sd = np.where(ambiguous, noise * ambiguous_mult, noise)
    x[:, cue_slice(d)] = s[:, None] + cue_sd[:, None] * rng.standard_normal((n, N_CUE))
    labels = label_from_signals(z, s, n_classes)
    kinds = rng.choice(3, size=n, p=mix)

    samples = []
    for i in range(n):
        g = 10.0 ** s[i]
        if kinds[i] == 0:
            ann: ScaleAnnotation = Exact(g)
        elif kinds[i] == 1:
            ann = Range(g / 2.0, g * 2.0)
        else:
            ann = Unknown()
        samples.append(Sample(f"{id_prefix}-{seed}-{i:06d}", x[i].copy(), int(labels[i]), ann))
    return SyntheticCorpus(samples, s, z, ambiguous, n_classes)


def generate(seed: int, n: int, d: int = 33, n_classes: int = 4, noise: float = 0.35,
             ambiguous_frac: float = 0.1) -> list[Sample]:
    return generate_corpus(seed, n, d, n_classes, noise, ambiguous_frac).samples


def class_balanced(corpus: SyntheticCorpus, per_class: int, seed: int = 0) -> SyntheticCorpus:
    """Subsample ``per_class`` samples of every class (fewer if a class is short)."""
    rng = np.random.default_rng(seed)
    labels = corpus.labels()
    idx = []
    for c in range(corpus.n_classes):
        members = np.flatnonzero(labels == c)
        idx.extend(rng.permutation(members)[:per_class])
    return corpus.subset(np.sort(np.array(idx, dtype=int)))


# --- sampler ------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int = 32
    exact_ratio: float = 0.25
    min_bins: int = 2

    def __post_init__(self):
        if not 0 < self.exact_ratio <= 1:
            raise ConfigError(f"exact_ratio must be in (0, 1], got {self.exact_ratio}")
        if self.min_bins < 1:
            raise ConfigError(f"min_bins must be >= 1, got {self.min_bins}")
        if self.batch_size < self.min_bins:
            raise ConfigError(f"batch_size {self.batch_size} < min_bins {self.min_bins}")

    @property
    def n_exact(self) -> int:
        return int(math.floor(self.batch_size * self.exact_ratio + 0.5))


def _bin_of(ann: ScaleAnnotation) -> int:
    return -1 if isinstance(ann, Unknown) else int(assign_tier(ann))


class BalancedScaleSampler:
    """Index batches with a fixed exact-GSD quota and at least ``min_bins`` tier bins.

    An epoch ends when either the exact or the non-exact pool cannot fill
    another batch; each index appears at most once per epoch.
    """

    def __init__(self, samples: Sequence[Sample], config: SamplerConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.bins = np.array([_bin_of(x.scale) for x in samples])
        is_exact = np.array([isinstance(x.scale, Exact) for x in samples], dtype=bool)
        self.exact_idx = np.flatnonzero(is_exact)
        self.other_idx = np.flatnonzero(~is_exact)
        n_ex, n_other = config.n_exact, config.batch_size - config.n_exact
        if len(self.exact_idx) < n_ex:
            raise SamplerError(f"exact quota: need {n_ex} exact samples per batch, corpus has "
                               f"{len(self.exact_idx)}")
        if len(self.other_idx) < n_other:
            raise SamplerError(f"non-exact quota: need {n_other} per batch, corpus has "
                               f"{len(self.other_idx)}")
        occupied = set(self.bins[self.bins >= 0].tolist())
        if len(occupied) < config.min_bins:
            raise SamplerError(f"min_bins: corpus occupies {len(occupied)} scale bin(s), "
                               f"{config.min_bins} required")
        self.batches_per_epoch = min(len(self.exact_idx) // n_ex if n_ex else 10**18,
                                     len(self.other_idx) // n_other if n_other else 10**18)

    def epoch(self, epoch: int = 0) -> list[np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng([self.seed, epoch])
        exact = rng.permutation(self.exact_idx)
        other = rng.permutation(self.other_idx)
        n_ex, n_other = cfg.n_exact, cfg.batch_size - cfg.n_exact
        batches = []
        for b in range(self.batches_per_epoch):
            ex_lo, ot_lo = b * n_ex, b * n_other
            self._repair(exact, ex_lo, ex_lo + n_ex, other, ot_lo, ot_lo + n_other)
            batches.append(np.concatenate([exact[ex_lo:ex_lo + n_ex], other[ot_lo:ot_lo + n_other]]))
        return batches

    def _n_bins(self, idx: np.ndarray) -> int:
        b = self.bins[idx]
        return len(set(b[b >= 0].tolist()))

    def _repair(self, exact, e0, e1, other, o0, o1) -> None:
        """Swap later pool members into the batch until it spans enough bins."""
        need = self.config.min_bins
        batch = lambda: np.concatenate([exact[e0:e1], other[o0:o1]])  # noqa: E731
        if self._n_bins(batch()) >= need:
            return
        for pool, lo, hi in ((exact, e0, e1), (other, o0, o1)):
            if hi <= lo:
                continue
            for j in range(hi, len(pool)):
                present = set(self.bins[batch()].tolist())
                if self.bins[pool[j]] < 0 or self.bins[pool[j]] in present:
                    continue
                # replace a member whose bin is duplicated (or unbinned)
                for k in range(lo, hi):
                    bk = self.bins[pool[k]]
                    members = self.bins[batch()]
                    if bk < 0 or np.sum(members == bk) > 1:
                        pool[k], pool[j] = pool[j], pool[k]
                        break
                if self._n_bins(batch()) >= need:
                    return
        raise SamplerError(f"min_bins: cannot assemble a batch spanning {need} scale bins")

    def __iter__(self) -> Iterator[np.ndarray]:
        epoch = 0
        while True:
            yield from self.epoch(epoch)
            epoch += 1


def balanced_batches(samples: Sequence[Sample], config: SamplerConfig, seed: int = 0,
                     epochs: int = 1) -> Iterator[np.ndarray]:
    sampler = BalancedScaleSampler(samples, config, seed)
    for e in range(epochs):
        yield from sampler.epoch(e)


# --- JSONL --------------------------------------------------------------------

_FIELDS = ("id", "features", "label", "gsd", "sensor", "source")


def sample_from_json(obj, line: int | None = None) -> Sample:
    if not isinstance(obj, dict):
        raise LoadError("expected a JSON object", line)
    missing = [k for k in _FIELDS if k not in obj]
    if missing:
        raise LoadError(f"missing field(s) {', '.join(missing)}", line)
    extra = set(obj) - set(_FIELDS)
    if extra:
        raise LoadError(f"unexpected field(s) {', '.join(sorted(extra))}", line)
    try:
        feats = np.array(obj["features"], dtype=np.float64)
        if feats.ndim != 1 or not np.all(np.isfinite(feats)):
            raise ValueError("features must be a flat list of finite numbers")
        label = obj["label"]
        if not isinstance(label, int) or isinstance(label, bool) or label < 0:
            raise ValueError(f"label must be a non-negative integer, got {label!r}")
        if obj["sensor"] is not None and not isinstance(obj["sensor"], str):
            raise ValueError("sensor must be a string or null")
        if not isinstance(obj["source"], str) or not isinstance(obj["id"], str):
            raise ValueError("id and source must be strings")
        scale = annotation_from_json(obj["gsd"])
    except (ValueError, TypeError) as exc:
        raise LoadError(str(exc), line) from exc
    return Sample(obj["id"], feats, label, scale, obj["sensor"], obj["source"])


def save_jsonl(samples: Sequence[Sample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for x in samples:
            fh.write(json.dumps(x.to_json()) + "\n")


def load_jsonl(path: str | Path) -> list[Sample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LoadError(f"invalid JSON ({exc.msg})", lineno) from exc
            out.append(sample_from_json(obj, lineno))
    return out


def tier_counts(samples: Sequence[Sample]) -> dict[str, int]:
    counts = {t.name: 0 for t in Tier}
    counts["UNKNOWN"] = 0
    for x in samples:
        b = _bin_of(x.scale)
        counts["UNKNOWN" if b < 0 else Tier(b).name] += 1
    return counts
