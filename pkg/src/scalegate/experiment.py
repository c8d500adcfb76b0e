"""Desk-scale reproduction run: train the variants, then spoof and probe them."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import ProbeReport, SpoofReport, spoof_accuracy, spoof_sweep, tau_probe
from .synthdata import SyntheticCorpus, block_factors, class_balanced, generate_corpus
from .trainer import ModelBundle, TrainConfig, TrainResult, accuracy, train


@dataclass
class DeskConfig:
    seed: int = 0
    n: int = 7500
    n_train: int = 6000
    d: int = 33
    n_classes: int = 4
    noise: float = 0.35
    ambiguous_frac: float = 0.1
    rank: int = 16
    steps: int = 20000
    lr: float = 0.05
    variants: tuple[str, ...] = ("cs_hlora", "vanilla_lora", "bucketed_moe")
    # spoof sets: a structure-tier set for the bell, a fine set for the 0.2 m boundary
    spoof_true_g: float = 3.0
    boundary_true_g: float = 0.15
    boundary_g: float = 0.2
    boundary_eps: float = 0.01
    spoof_per_class: int = 500
    n_boot: int = 1000


@dataclass
class DeskRun:
    config: DeskConfig
    corpus: SyntheticCorpus
    train_set: SyntheticCorpus
    test_set: SyntheticCorpus
    spoof_set: SyntheticCorpus
    boundary_set: SyntheticCorpus
    results: dict[str, TrainResult] = field(default_factory=dict)
    seconds: float = 0.0

    def bundle(self, variant: str) -> ModelBundle:
        return self.results[variant].bundle

    def test_accuracy(self, variant: str) -> float:
        t = self.test_set
        return accuracy(self.bundle(variant), t.features(), t.labels(), t.true_s)

    def spoof(self, variant: str, n_boot: int | None = None) -> SpoofReport:
        sp = self.spoof_set
        return spoof_sweep(self.bundle(variant), sp.features(), sp.labels(), self.config.spoof_true_g,
                           n_boot=self.config.n_boot if n_boot is None else n_boot,
                           seed=self.config.seed, variant=variant)

    def spoof_at(self, variant: str, g: float, which: str = "spoof") -> float:
        st = self.spoof_set if which == "spoof" else self.boundary_set
        return float(spoof_accuracy(self.bundle(variant), st.features(), st.labels(), g).mean())

    def boundary_jump(self, variant: str) -> float:
        """Accuracy change on the boundary set between just below and just above the tier edge."""
        g, e = self.config.boundary_g, self.config.boundary_eps
        return abs(self.spoof_at(variant, g - e, "boundary") - self.spoof_at(variant, g + e, "boundary"))

    def probe(self) -> ProbeReport:
        t = self.test_set
        return tau_probe(self.bundle("cs_hlora"), t.features(), t.true_s, block_factors(t.features()),
                         seed=self.config.seed)


def make_data(cfg: DeskConfig) -> tuple[SyntheticCorpus, SyntheticCorpus, SyntheticCorpus]:
    corpus = generate_corpus(cfg.seed, cfg.n, cfg.d, cfg.n_classes, cfg.noise, cfg.ambiguous_frac)
    sets = []
    for i, g in enumerate((cfg.spoof_true_g, cfg.boundary_true_g)):
        raw = generate_corpus(cfg.seed + 1000 + i, 6 * cfg.spoof_per_class, cfg.d, cfg.n_classes,
                              cfg.noise, cfg.ambiguous_frac, fixed_g=g, id_prefix="spoof")
        sets.append(class_balanced(raw, cfg.spoof_per_class, seed=cfg.seed))
    return corpus, sets[0], sets[1]


def run_desk(cfg: DeskConfig = DeskConfig(), log=None) -> DeskRun:
    start = time.perf_counter()
    corpus, spoof_set, boundary_set = make_data(cfg)
    run = DeskRun(cfg, corpus, corpus.subset(np.arange(cfg.n_train)),
                  corpus.subset(np.arange(cfg.n_train, cfg.n)), spoof_set, boundary_set)
    for v in cfg.variants:
        tcfg = TrainConfig(steps=cfg.steps, lr=cfg.lr, variant=v, rank=cfg.rank, seed=cfg.seed,
                           log_every=max(1, cfg.steps // 1000))
        run.results[v] = train(tcfg, run.train_set.samples, cfg.n_classes)
        if log:
            log(f"{v}: trained in {time.perf_counter() - start:.0f}s, "
                f"test acc {run.test_accuracy(v):.3f}")
    run.seconds = time.perf_counter() - start
    return run


def grid_step_log(report: SpoofReport) -> float:
    return float(np.mean(np.diff(np.log10(report.grid))))


def peak_offset_steps(report: SpoofReport) -> float:
    """Distance of the spoof-curve argmax from the true scale, in grid steps."""
    return abs(math.log10(report.peak_g) - math.log10(report.true_g)) / grid_step_log(report)
