"""Joint training of the adapters and scale head over a frozen two-layer backbone.

The task loss is softmax cross-entropy under gates driven by each sample's
effective scale; the scale head adds a Gaussian NLL on exact-GSD samples,
weighted 0.3 for the first 10% of steps and 0.1 afterwards.
"""
from __future__ import annotations

import csv
import copy
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .baselines import BucketedMoEAdapter, LoRAAdapter
from .cshlora import CSHLoRAAdapter
from .diffcore import Tensor
from .errors import CheckpointError, ConfigError, DimensionError, TrainingDiverged
from .resolver import effective_scale_eval, routes_to_sse
from .scale_types import Exact, Range, ScaleAnnotation, to_log_scale
from .sseu import SSEUHead, calibration_ratio
from .synthdata import BalancedScaleSampler, Sample, SamplerConfig

log = logging.getLogger(__name__)

VARIANTS = ("cs_hlora", "vanilla_lora", "scale_as_feature", "bucketed_moe")
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("step", "loss_total", "loss_task", "loss_nll", "lambda", "grad_norm",
                  "calib_ratio", "effmag_layer0", "effmag_layer1")


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 32
    lr: float = 0.05
    warmup_frac: float = 0.05
    lambda_early: float = 0.3
    lambda_late: float = 0.1
    early_fraction: float = 0.10
    p_e2e: float = 0.2
    clip_norm: float = 5.0
    seed: int = 0
    variant: str = "cs_hlora"
    rank: int = 16
    hidden: int = 64
    lora_alpha: float | None = None
    exact_ratio: float = 0.25
    min_bins: int = 2
    log_every: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if not 0 < self.early_fraction < 1:
            raise ConfigError(f"early_fraction must be in (0, 1), got {self.early_fraction}")
        if self.lambda_early < 0 or self.lambda_late < 0:
            raise ConfigError("lambda values must be non-negative")
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("steps, batch_size and lr must be positive")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def lambda_gsd(t: int, cfg: TrainConfig) -> float:
    return cfg.lambda_early if t / cfg.steps < cfg.early_fraction else cfg.lambda_late


def learning_rate(t: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to zero."""
    warm = int(math.ceil(cfg.warmup_frac * cfg.steps))
    if t < warm:
        return cfg.lr * (t + 1) / warm
    progress = (t - warm) / max(1, cfg.steps - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- model --------------------------------------------------------------------

def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    q *= np.sign(np.diag(r))
    return gain * (q if rows >= cols else q.T)


@dataclass
class ModelSpec:
    d_in: int
    n_classes: int
    variant: str = "cs_hlora"
    rank: int = 16
    hidden: int = 64
    lora_alpha: float | None = None
    seed: int = 0

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ModelBundle:
    """Frozen backbone, two adapters, scale head and a trainable linear classifier.

    The scale head reads the input feature vector itself, so its estimate never
    depends on the gate it feeds.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        d, hdim, r = spec.d_in, spec.hidden, spec.rank
        self.W1 = Tensor(_orthogonal(rng, hdim, d, 1.0), name="backbone.W1")
        self.W2 = Tensor(_orthogonal(rng, hdim, hdim, 1.0), name="backbone.W2")
        adapter_in0 = d + 1 if spec.variant == "scale_as_feature" else d
        self.adapters = [self._make_adapter(adapter_in0, hdim, rng, "layer0"),
                         self._make_adapter(hdim, hdim, rng, "layer1")]
        self.sseu = SSEUHead(d, rng=rng)
        bound = 1.0 / math.sqrt(hdim)
        self.Wc = Tensor(rng.uniform(-bound, bound, (spec.n_classes, hdim)), requires_grad=True,
                         name="classifier.W")
        self.bc = Tensor(np.zeros(spec.n_classes), requires_grad=True, name="classifier.b")
        self.extra: dict = {}

    def _make_adapter(self, d_in, d_out, rng, name):
        v, r, a = self.spec.variant, self.spec.rank, self.spec.lora_alpha
        if v == "cs_hlora":
            return CSHLoRAAdapter(d_in, d_out, r, a, rng=rng, name=name)
        if v == "bucketed_moe":
            return BucketedMoEAdapter(d_in, d_out, r, a, rng=rng, name=name)
        return LoRAAdapter(d_in, d_out, r, a, rng=rng, name=name)

    @property
    def variant(self) -> str:
        return self.spec.variant

    def trainable(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for ad in self.adapters:
            out.update(ad.parameters())
        out.update(self.sseu.parameters())
        out[self.Wc.name] = self.Wc
        out[self.bc.name] = self.bc
        return out

    def n_trainable(self) -> int:
        return sum(t.data.size for t in self.trainable().values())

    def n_adapter_params(self) -> int:
        return sum(t.data.size for ad in self.adapters for t in ad.parameters().values())

    def backbone_checksum(self) -> str:
        h = hashlib.sha256()
        for w in (self.W1, self.W2):
            h.update(np.ascontiguousarray(w.data).tobytes())
        return h.hexdigest()

    def forward(self, x: Tensor, s: Tensor) -> Tensor:
        """Logits (m, C) for feature rows x (m, d_in) and per-row log-scales s (m,)."""
        if x.data.ndim != 2 or x.shape[1] != self.spec.d_in:
            raise DimensionError(f"model expects feature rows of width {self.spec.d_in}, "
                                 f"got {x.shape}")
        if s.shape != (x.shape[0],):
            raise DimensionError(f"need one scale per row: {s.shape} vs {x.shape[0]} rows")
        ad0, ad1 = self.adapters
        in0 = dc.append_column(x, s) if self.variant == "scale_as_feature" else x
        h1 = dc.gelu(dc.add(dc.matmul(x, dc.transpose(self.W1)), ad0.update(in0, s)))
        h2 = dc.gelu(dc.add(dc.matmul(h1, dc.transpose(self.W2)), ad1.update(h1, s)))
        return dc.add_row(dc.matmul(h2, dc.transpose(self.Wc)), self.bc)

    def logits(self, features: np.ndarray, s: np.ndarray) -> np.ndarray:
        return self.forward(dc.constant(features), dc.constant(np.asarray(s, dtype=float))).data

    def predict(self, features: np.ndarray, s: np.ndarray, chunk: int = 4096) -> np.ndarray:
        out = [self.logits(features[i:i + chunk], s[i:i + chunk]).argmax(axis=1)
               for i in range(0, len(features), chunk)]
        return np.concatenate(out)

    def bottleneck(self, features: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Gated latent ``h(s) * (A x)`` at the first adapted layer (cs_hlora only)."""
        ad0 = self.adapters[0]
        if not isinstance(ad0, CSHLoRAAdapter):
            raise ConfigError(f"bottleneck probing needs the cs_hlora variant, got {self.variant}")
        return ad0.latent(dc.constant(features), dc.constant(np.asarray(s, dtype=float))).data

    def effective_magnitudes(self) -> list[float]:
        return [ad.effective_magnitude() for ad in self.adapters]

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.trainable().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.trainable().items():
            t.data = state[k].copy()


def baseline_forward(bundle: ModelBundle, features: np.ndarray, s) -> np.ndarray:
    """Logits for any variant at a given (scalar or per-row) log-scale."""
    s = np.broadcast_to(np.asarray(s, dtype=float), (len(features),)).copy()
    return bundle.logits(np.asarray(features, dtype=float), s)


# --- loss ---------------------------------------------------------------------

@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    scales: list[ScaleAnnotation]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Batch":
        return cls(np.stack([x.features for x in samples]), np.array([x.label for x in samples]),
                   [x.scale for x in samples])


@dataclass
class LossParts:
    task: float
    nll: float
    lam: float
    n_exact: int
    n_routed_exact: int


def joint_loss(bundle: ModelBundle, batch: Batch, t: int, cfg: TrainConfig,
               rng: np.random.Generator | None = None, coins=None, range_draws=None
               ) -> tuple[Tensor, LossParts]:
    """Task cross-entropy under effective-scale gating plus lambda(t) * NLL.

    Uniform draws come from ``rng`` (two vectors, coins then range draws)
    unless passed explicitly.
    """
    m = len(batch.labels)
    if m == 0:
        raise ConfigError("empty batch")
    if coins is None or range_draws is None:
        if rng is None:
            raise ConfigError("joint_loss needs an rng or explicit draws")
        coins = rng.random(m)
        range_draws = rng.random(m)
    x = dc.constant(batch.features)
    mu, log_var = bundle.sseu.forward(x)

    routed = np.zeros(m)
    fixed = np.zeros(m)
    exact = np.zeros(m)
    s_true = np.zeros(m)
    for i, ann in enumerate(batch.scales):
        if isinstance(ann, Exact):
            exact[i] = 1.0
            s_true[i] = to_log_scale(ann.value)
        if routes_to_sse(ann, coins[i], cfg.p_e2e):
            routed[i] = 1.0
        elif isinstance(ann, Exact):
            fixed[i] = s_true[i]
        elif isinstance(ann, Range):
            lo, hi = math.log10(ann.lo), math.log10(ann.hi)
            fixed[i] = lo + range_draws[i] * (hi - lo)
    if routed.any():
        s_eff = dc.add(dc.mul(dc.constant(routed), mu), dc.constant(fixed))
    else:
        s_eff = dc.constant(fixed)

    task = dc.softmax_cross_entropy(bundle.forward(x, s_eff), batch.labels.astype(int))
    lam = lambda_gsd(t, cfg)
    nll = dc.gaussian_nll(mu, log_var, s_true, exact)
    total = dc.add(task, dc.scale(nll, lam))
    parts = LossParts(task.item(), nll.item(), lam, int(exact.sum()), int((routed * exact).sum()))
    return total, parts


# --- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    bundle: ModelBundle
    metrics: list[dict]
    n_exact_seen: int = 0
    n_exact_routed: int = 0
    backbone_checksum_before: str = ""
    backbone_checksum_after: str = ""
    task_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))


def build_bundle(cfg: TrainConfig, d_in: int, n_classes: int) -> ModelBundle:
    return ModelBundle(ModelSpec(d_in, n_classes, cfg.variant, cfg.rank, cfg.hidden,
                                 cfg.lora_alpha, cfg.seed))


def _val_calibration(bundle: ModelBundle, feats: np.ndarray, s_true: np.ndarray) -> float:
    if len(feats) == 0:
        return float("nan")
    mu, lv = bundle.sseu.predict_batch(feats)
    return calibration_ratio(mu, np.exp(0.5 * lv), s_true)


def train(cfg: TrainConfig, samples: Sequence[Sample], n_classes: int | None = None,
          bundle: ModelBundle | None = None) -> TrainResult:
    """Plain SGD with warmup + cosine decay and global-norm clipping."""
    if not samples:
        raise ConfigError("empty training corpus")
    d_in = len(samples[0].features)
    n_classes = n_classes or (max(x.label for x in samples) + 1)
    bundle = bundle or build_bundle(cfg, d_in, n_classes)
    sampler = BalancedScaleSampler(samples, SamplerConfig(cfg.batch_size, cfg.exact_ratio,
                                                          cfg.min_bins), seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    params = bundle.trainable()
    checksum = bundle.backbone_checksum()

    val_idx = [i for i, x in enumerate(samples) if isinstance(x.scale, Exact)][:512]
    val_x = np.stack([samples[i].features for i in val_idx]) if val_idx else np.zeros((0, d_in))
    val_s = np.array([to_log_scale(samples[i].scale.value) for i in val_idx])

    metrics: list[dict] = []
    seen = routed = 0
    trace = np.empty(cfg.steps)
    last_good = bundle.state()
    batches = iter(sampler)
    for t in range(cfg.steps):
        idx = next(batches)
        batch = Batch.from_samples([samples[i] for i in idx])
        for p in params.values():
            p.grad = None
        loss, parts = joint_loss(bundle, batch, t, cfg, rng)
        if not math.isfinite(loss.item()):
            bad = copy.deepcopy(bundle)
            bad.load_state(last_good)
            raise TrainingDiverged(t, bad)
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in params.items()}
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        clip = min(1.0, cfg.clip_norm / gnorm) if gnorm > 0 else 1.0
        lr = learning_rate(t, cfg)
        last_good = bundle.state()
        for k, p in params.items():
            p.data = p.data - lr * clip * grads[k]
        trace[t] = parts.task
        seen += parts.n_exact
        routed += parts.n_routed_exact

        if t % cfg.log_every == 0 or t == cfg.steps - 1:
            mags = bundle.effective_magnitudes()
            metrics.append({
                "step": t, "loss_total": loss.item(), "loss_task": parts.task,
                "loss_nll": parts.nll, "lambda": parts.lam, "grad_norm": gnorm,
                "calib_ratio": _val_calibration(bundle, val_x, val_s),
                "effmag_layer0": mags[0], "effmag_layer1": mags[1],
            })
    after = bundle.backbone_checksum()
    if after != checksum:
        raise RuntimeError("frozen backbone changed during training")
    return TrainResult(bundle, metrics, seen, routed, checksum, after, trace)


# --- evaluation ---------------------------------------------------------------

def eval_scales(bundle: ModelBundle, samples: Sequence[Sample]) -> np.ndarray:
    """Evaluation-time scale per sample: exact value, range midpoint, or the head's mean."""
    feats = np.stack([x.features for x in samples])
    mu, _ = bundle.sseu.predict_batch(feats)
    return np.array([effective_scale_eval(x.scale, mu[i]) for i, x in enumerate(samples)])


def accuracy(bundle: ModelBundle, features: np.ndarray, labels: np.ndarray, s) -> float:
    s = np.broadcast_to(np.asarray(s, dtype=float), (len(features),))
    return float(np.mean(bundle.predict(features, s) == labels))


def write_metrics_csv(metrics: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in metrics:
            w.writerow({k: (repr(float(v)) if k != "step" else int(v)) for k, v in row.items()})


# --- checkpoints --------------------------------------------------------------

def checkpoint_save(bundle: ModelBundle, path: str | Path, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "fingerprint": bundle.spec.fingerprint(),
        "spec": asdict(bundle.spec),
        "backbone": {"W1": bundle.W1.data.tolist(), "W2": bundle.W2.data.tolist()},
        "adapters": [ad.to_dict() for ad in bundle.adapters],
        "sseu": bundle.sseu.to_dict(),
        "classifier": {"W": bundle.Wc.data.tolist(), "b": bundle.bc.data.tolist()},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(payload))


def _adapter_from_dict(d: dict, name: str):
    kind = d.get("type")
    if kind == "cs_hlora":
        return CSHLoRAAdapter.from_dict(d, name=name)
    if kind == "lora":
        return LoRAAdapter.from_dict(d, name=name)
    if kind == "bucketed_moe":
        return BucketedMoEAdapter.from_dict(d, name=name)
    raise CheckpointError(f"unknown adapter type {kind!r}")


def checkpoint_load(path: str | Path, expected_fingerprint: str | None = None) -> ModelBundle:
    """Rebuild a bundle; a fingerprint mismatch warns but still loads."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if payload["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {payload['version']}")
        spec = ModelSpec(**payload["spec"])
        bundle = ModelBundle(spec)
        bundle.W1.data = np.array(payload["backbone"]["W1"], dtype=np.float64)
        bundle.W2.data = np.array(payload["backbone"]["W2"], dtype=np.float64)
        bundle.adapters = [_adapter_from_dict(d, f"layer{i}") for i, d in enumerate(payload["adapters"])]
        bundle.sseu = SSEUHead.from_dict(payload["sseu"])
        bundle.Wc.data = np.array(payload["classifier"]["W"], dtype=np.float64).reshape(bundle.Wc.shape)
        bundle.bc.data = np.array(payload["classifier"]["b"], dtype=np.float64).reshape(bundle.bc.shape)
        stored = payload["fingerprint"]
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if len(bundle.adapters) != 2:
        raise CheckpointError(f"checkpoint holds {len(bundle.adapters)} adapters, expected 2")
    if stored != spec.fingerprint() or (expected_fingerprint and expected_fingerprint != stored):
        warnings.warn(f"checkpoint fingerprint {stored} does not match the expected configuration",
                      stacklevel=2)
    bundle.extra = payload.get("extra", {})
    return bundle
