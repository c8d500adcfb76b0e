"""Command-line workflow: gen-data, resolve, train, eval, spoof, probe, gates.

Config precedence is flags > ``--config`` JSON > defaults. The config file may
hold ``data``, ``train``, ``sampler`` and ``resolver`` sections. Every
subcommand writes its outputs and a ``manifest_<cmd>.json`` under ``--out-dir``.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics, synthdata
from .errors import (CheckpointError, ConfigError, ContractError, DimensionError, DomainError,
                     LoadError, SamplerError, ScaleGateError, TrainingDiverged)
from .resolver import ResolverConfig, SensorRegistry, inject_gsd, resolve_inference
from .scale_types import Exact, Unknown, annotation_from_json, annotation_to_json
from .sseu import ScaleEstimate, clamp_log_var
from .trainer import (TrainConfig, accuracy, checkpoint_load, checkpoint_save, eval_scales, train,
                      write_metrics_csv)

log = logging.getLogger("scalegate")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
VALIDATION_ERRORS = (ConfigError, DimensionError, DomainError, LoadError, SamplerError,
                     CheckpointError, ContractError)

DATA_DEFAULTS = {"n": 7500, "d": 33, "classes": 4, "noise": 0.35, "ambiguous_frac": 0.1,
                 "test_frac": 0.2}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


@dataclass
class CliConfig:
    command: str
    out_dir: Path
    seed: int
    data: dict = field(default_factory=lambda: dict(DATA_DEFAULTS))
    train: dict = field(default_factory=dict)
    resolver: dict = field(default_factory=dict)
    produced: list[str] = field(default_factory=list)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({"seed": self.seed, **self.train})

    def resolver_config(self) -> ResolverConfig:
        return ResolverConfig(**self.resolver)

    def output(self, name: str | Path) -> Path:
        p = Path(name)
        p = p if p.is_absolute() else self.out_dir / p
        p.parent.mkdir(parents=True, exist_ok=True)
        self.produced.append(str(p))
        return p


def _build_parser() -> _Parser:
    p = _Parser(prog="scalegate", description=__doc__.splitlines()[0])
    common = _Parser(add_help=False)
    common.add_argument("--out-dir", default="runs", help="directory for every output")
    common.add_argument("--config", help="JSON config with data/train/sampler/resolver sections")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic JSONL corpus")
    g.add_argument("--n", type=int)
    g.add_argument("--d", type=int)
    g.add_argument("--classes", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--ambiguous-frac", type=float)
    g.add_argument("--fixed-g", type=float, help="put every sample at this GSD (m/px)")
    g.add_argument("--out", default="corpus.jsonl")

    r = sub.add_parser("resolve", parents=[common], help="attach GSD annotations from a sensor registry")
    r.add_argument("--in", dest="inp", required=True, help="metadata JSONL")
    r.add_argument("--registry", help="registry JSON (tag -> annotation); defaults built in")
    r.add_argument("--out", default="resolved.jsonl")

    t = sub.add_parser("train", parents=[common], help="train one model variant")
    t.add_argument("--variant", choices=["cs_hlora", "vanilla_lora", "scale_as_feature", "bucketed_moe"])
    t.add_argument("--corpus", help="JSONL corpus; generated from the data config when omitted")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--rank", type=int)
    t.add_argument("--checkpoint", default="ckpt.json")
    t.add_argument("--metrics", default="metrics.csv")

    e = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--all", action="store_true", help="score the whole corpus, not just the test tail")
    e.add_argument("--out", default="eval.json")

    s = sub.add_parser("spoof", parents=[common], help="GSD-spoofing sweep")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--true-g", type=float, required=True)
    s.add_argument("--n", type=int, default=2000, help="class-balanced test-set size")
    s.add_argument("--grid-lo", type=float, default=0.01)
    s.add_argument("--grid-hi", type=float, default=30.0)
    s.add_argument("--grid-n", type=int, default=13)
    s.add_argument("--boot", type=int, default=1000)
    s.add_argument("--out", default="spoof.csv")

    pr = sub.add_parser("probe", parents=[common], help="per-rank ridge probe of the bottleneck")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--n", type=int, default=2000)
    pr.add_argument("--out", default="probe.csv")

    ga = sub.add_parser("gates", parents=[common], help="tier-averaged gate curves")
    ga.add_argument("--checkpoint", help="omit to export an untrained adapter")
    ga.add_argument("--rank", type=int, default=64)
    ga.add_argument("--layer", type=int, default=0)
    ga.add_argument("--points", type=int, default=200)
    ga.add_argument("--out", default="gates.csv")
    return p


def _load_config(args) -> CliConfig:
    file_cfg: dict = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(file_cfg) - {"data", "train", "sampler", "resolver", "seed"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
    cfg = CliConfig(args.command, Path(args.out_dir), seed)
    cfg.data.update(file_cfg.get("data", {}))
    cfg.train.update(file_cfg.get("train", {}))
    cfg.train.update(file_cfg.get("sampler", {}))
    cfg.resolver.update(file_cfg.get("resolver", {}))
    unknown = set(cfg.data) - set(DATA_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown data field(s): {', '.join(sorted(unknown))}")

    flag_map = {"n": ("data", "n"), "d": ("data", "d"), "classes": ("data", "classes"),
                "noise": ("data", "noise"), "ambiguous_frac": ("data", "ambiguous_frac"),
                "variant": ("train", "variant"), "steps": ("train", "steps"), "lr": ("train", "lr"),
                "batch_size": ("train", "batch_size")}
    for flag, (section, key) in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            getattr(cfg, section)[key] = val
    if args.command == "train" and args.rank is not None:
        cfg.train["rank"] = args.rank
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg


def _require_file(path: str | None, what: str) -> Path:
    if path is None or not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


def _generate(cfg: CliConfig, seed: int, n: int | None = None, fixed_g: float | None = None):
    d = cfg.data
    return synthdata.generate_corpus(seed, n or d["n"], d["d"], d["classes"], d["noise"],
                                     d["ambiguous_frac"], fixed_g=fixed_g)


def _split(samples: list, test_frac: float) -> tuple[list, list]:
    n_test = int(round(len(samples) * test_frac))
    return samples[:len(samples) - n_test], samples[len(samples) - n_test:]


# --- subcommands --------------------------------------------------------------

def cmd_gen_data(args, cfg: CliConfig) -> None:
    corpus = _generate(cfg, cfg.seed, fixed_g=args.fixed_g)
    synthdata.save_jsonl(corpus.samples, cfg.output(args.out))


def cmd_resolve(args, cfg: CliConfig) -> None:
    src = _require_file(args.inp, "metadata file")
    registry = SensorRegistry.load(args.registry) if args.registry else SensorRegistry()
    out = cfg.output(args.out)
    with open(src) as fin, open(out, "w") as fout:
        for lineno, line in enumerate(fin, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LoadError(f"invalid JSON ({exc.msg})", lineno) from exc
            if not isinstance(rec, dict):
                raise LoadError("expected a JSON object", lineno)
            current = annotation_from_json(rec["gsd"]) if "gsd" in rec else Unknown()
            if isinstance(current, Unknown):
                current = inject_gsd(rec, registry)
            rec["gsd"] = annotation_to_json(current)
            fout.write(json.dumps(rec) + "\n")


def cmd_train(args, cfg: CliConfig) -> None:
    tcfg = cfg.train_config()
    if args.corpus:
        samples = synthdata.load_jsonl(_require_file(args.corpus, "corpus"))
        n_classes = cfg.data["classes"]
    else:
        samples = _generate(cfg, cfg.seed).samples
        n_classes = cfg.data["classes"]
    train_set, _ = _split(samples, cfg.data["test_frac"])
    if max(x.label for x in train_set) >= n_classes:
        raise ConfigError(f"corpus labels exceed the configured {n_classes} classes")
    extra = {"data": cfg.data, "train": asdict(tcfg), "seed": cfg.seed}
    try:
        result = train(tcfg, train_set, n_classes)
    except TrainingDiverged as exc:
        checkpoint_save(exc.last_good, cfg.output(args.checkpoint), extra=extra | {"diverged_at": exc.step})
        raise
    write_metrics_csv(result.metrics, cfg.output(args.metrics))
    checkpoint_save(result.bundle, cfg.output(args.checkpoint), extra=extra)


def _checkpoint(path: str):
    return checkpoint_load(_require_file(path, "checkpoint"))


def _check_dims(bundle, d: int) -> None:
    if bundle.spec.d_in != d:
        raise DimensionError(f"dimension conflict: checkpoint expects {bundle.spec.d_in} features, "
                             f"corpus has {d}")


def cmd_eval(args, cfg: CliConfig) -> None:
    bundle = _checkpoint(args.checkpoint)
    samples = synthdata.load_jsonl(_require_file(args.corpus, "corpus"))
    if not samples:
        raise ContractError("empty corpus")
    _check_dims(bundle, len(samples[0].features))
    if not args.all:
        _, samples = _split(samples, bundle.extra.get("data", cfg.data)["test_frac"])
    feats = np.stack([x.features for x in samples])
    labels = np.array([x.label for x in samples])
    s_eval = eval_scales(bundle, samples)
    rcfg = cfg.resolver_config()
    mu, lv = bundle.sseu.predict_batch(feats)
    s_inf, branches = [], {"META": 0, "SSE": 0, "FALLBACK": 0}
    for i, x in enumerate(samples):
        g_meta = x.scale.value if isinstance(x.scale, Exact) else None
        g_star, br = resolve_inference(g_meta, ScaleEstimate(float(mu[i]), clamp_log_var(float(lv[i]))), rcfg)
        s_inf.append(math.log10(g_star))
        branches[br.value] += 1
    report = {
        "n": len(samples),
        "accuracy_eval_rule": accuracy(bundle, feats, labels, s_eval),
        "accuracy_inference_resolver": accuracy(bundle, feats, labels, np.array(s_inf)),
        "resolver_branches": branches,
        "variant": bundle.variant,
    }
    cfg.output(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps(report, sort_keys=True))


def cmd_spoof(args, cfg: CliConfig) -> None:
    bundle = _checkpoint(args.checkpoint)
    cfg.data.update(bundle.extra.get("data", {}))
    _check_dims(bundle, cfg.data["d"])
    n_classes = cfg.data["classes"]
    per_class = max(1, args.n // n_classes)
    pool = _generate(cfg, cfg.seed + 1, n=4 * args.n, fixed_g=args.true_g)
    test = synthdata.class_balanced(pool, per_class, seed=cfg.seed)
    grid = diagnostics.spoof_grid(args.grid_lo, args.grid_hi, args.grid_n)
    rep = diagnostics.spoof_sweep(bundle, test.features(), test.labels(), args.true_g, grid,
                                  n_boot=args.boot, seed=cfg.seed)
    diagnostics.write_spoof_csv([rep], cfg.output(args.out))


def cmd_probe(args, cfg: CliConfig) -> None:
    bundle = _checkpoint(args.checkpoint)
    cfg.data.update(bundle.extra.get("data", {}))
    _check_dims(bundle, cfg.data["d"])
    probe_set = _generate(cfg, cfg.seed + 2, n=args.n)
    feats = probe_set.features()
    rep = diagnostics.tau_probe(bundle, feats, probe_set.true_s, synthdata.block_factors(feats),
                                seed=cfg.seed)
    diagnostics.write_probe_csv(rep, cfg.output(args.out))


def cmd_gates(args, cfg: CliConfig) -> None:
    from .cshlora import CSHLoRAAdapter, init_tiers

    if args.checkpoint:
        adapter = _checkpoint(args.checkpoint).adapters[args.layer]
        if not isinstance(adapter, CSHLoRAAdapter):
            raise ConfigError("gate curves need a cs_hlora checkpoint")
    else:
        adapter = init_tiers(args.rank, seed=cfg.seed)
    diagnostics.export_gate_curves(adapter, np.linspace(-2.0, 2.0, args.points), cfg.output(args.out))


COMMANDS = {"gen-data": cmd_gen_data, "resolve": cmd_resolve, "train": cmd_train,
            "eval": cmd_eval, "spoof": cmd_spoof, "probe": cmd_probe, "gates": cmd_gates}
MODULE_OF = {"gen-data": "synthdata", "resolve": "resolver", "train": "trainer", "eval": "trainer",
             "spoof": "diagnostics", "probe": "diagnostics", "gates": "diagnostics"}


def _sha256(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(cfg: CliConfig, argv: list[str]) -> Path:
    path = cfg.out_dir / f"manifest_{cfg.command}.json"
    manifest = {
        "command": cfg.command, "argv": argv, "seed": cfg.seed,
        "data": cfg.data, "train": cfg.train, "resolver": cfg.resolver,
        "files": {p: _sha256(p) for p in cfg.produced},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    module = MODULE_OF[args.command]
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](args, cfg)
        write_manifest(cfg, argv)
    except VALIDATION_ERRORS as exc:
        print(f"error [{module}]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDiverged, ScaleGateError, OSError, RuntimeError) as exc:
        print(f"error [{module}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
