"""Ablation presets, config files, multi-seed runs and preset comparison."""
from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
import statistics
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import model
from .cluster import CriteriaFlags, DbscanParams
from .errors import ConfigError
from .losses import LossConfig
from .synthgen import BenchmarkSpec, generate
from .train import TrainConfig, run, write_log_csv

log = logging.getLogger(__name__)

__all__ = [
    "PRESETS",
    "RunSpec",
    "apply_preset",
    "load_config",
    "config_hash",
    "run_experiment",
    "compare_presets",
]

_ALL = CriteriaFlags(True, True, True)
_NONE = CriteriaFlags(False, False, False)

# name -> (description, TrainConfig overrides)
PRESETS = {
    "dbscan": ("plain DBSCAN pseudo-labels, no reliability criteria", {"criteria": _NONE}),
    "dbscan_ic": ("independence + compactness", {"criteria": CriteriaFlags(True, True, False)}),
    "dbscan_q": ("quantity only", {"criteria": CriteriaFlags(False, False, True)}),
    "dbscan_icq": ("all three criteria", {"criteria": _ALL}),
    "no_aci": ("all criteria, head re-randomized every epoch", {"criteria": _ALL, "use_aci": False}),
    "no_db": ("all criteria, domain balance weight 0", {"criteria": _ALL, "lambda_m": 0.0}),
    "only_A": ("synthetic domain only; B never loaded", {"use_B": False}),
    "domainmix_labeled": ("B ground truth replaces pseudo-labels", {"labeled_B": True}),
    "domainmix_unlabeled": ("full method", {"criteria": _ALL}),
}


def apply_preset(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    over = dict(PRESETS[name][1])
    lam = over.pop("lambda_m", None)
    if lam is not None:
        over["loss"] = replace(cfg.loss, lambda_m=lam)
    return replace(cfg, **over)


@dataclass(frozen=True)
class RunSpec:
    benchmark: BenchmarkSpec
    train: TrainConfig
    preset: str = "domainmix_unlabeled"
    out_dir: str = "runs"
    seeds: tuple = (0,)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if not self.seeds:
            raise ConfigError("seed list must not be empty")


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        return float(raw)
    return raw


def _section(parser, name, cls, base):
    if not parser.has_section(name):
        return base
    known = {f.name: getattr(base, f.name) for f in fields(cls)}
    over = {}
    for key, raw in parser.items(name):
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        try:
            over[key] = _coerce(raw.strip(), known[key])
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from exc
    try:
        return replace(base, **over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def load_config(path=None) -> tuple:
    """Read ``[benchmark] [train] [loss] [cluster] [criteria]`` sections.

    Every key is optional; an empty or missing file yields the defaults.
    Returns ``(BenchmarkSpec, TrainConfig)``.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} not found")
        parser.read(path)
    bench = _section(parser, "benchmark", BenchmarkSpec, BenchmarkSpec())
    train = _section(parser, "train", TrainConfig, TrainConfig())
    loss = _section(parser, "loss", LossConfig, train.loss)
    base_db = train.dbscan
    if parser.has_section("cluster") and "eps" in parser["cluster"]:
        # loose/tight radii follow eps unless set explicitly
        base_db = replace(base_db, eps=float(parser["cluster"]["eps"]), eps_loose=None, eps_tight=None)
    dbp = _section(parser, "cluster", DbscanParams, base_db)
    flags = _section(parser, "criteria", CriteriaFlags, train.criteria)
    return bench, replace(train, loss=loss, dbscan=dbp, criteria=flags)


def config_hash(bench: BenchmarkSpec, train: TrainConfig) -> str:
    """Hash of everything except the seeds, so seeds of one setting share it."""
    b = bench.to_dict()
    b.pop("seed")
    t = train.to_dict()
    t.pop("seed")
    blob = json.dumps({"benchmark": b, "train": t}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def benchmark_hash(bench: BenchmarkSpec) -> str:
    b = bench.to_dict()
    b.pop("seed")
    return hashlib.sha256(json.dumps(b, sort_keys=True).encode()).hexdigest()[:16]


def run_one(bench_spec: BenchmarkSpec, train_cfg: TrainConfig, preset: str, seed: int):
    """Generate the seed's benchmark and train one preset on it."""
    bench = generate(replace(bench_spec, seed=seed))
    cfg = replace(apply_preset(train_cfg, preset), seed=seed)
    return bench, cfg, run(cfg, bench)


def run_experiment(spec: RunSpec) -> dict:
    """Train every seed of ``spec`` and write logs, reports and checkpoints.

    Layout under ``out_dir/preset``: ``seed<k>.csv``, ``seed<k>.json``,
    ``seed<k>.ckpt`` and ``aggregate.json``. ``MANIFEST.json`` records
    completion and is left with ``complete: false`` if a seed fails.
    """
    out = Path(spec.out_dir) / spec.preset
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(spec.benchmark, apply_preset(spec.train, spec.preset))
    bhash = benchmark_hash(spec.benchmark)
    manifest = {"preset": spec.preset, "seeds": list(spec.seeds), "done": [], "complete": False, "config_hash": chash}
    _write_json(out / "MANIFEST.json", manifest)

    per_seed = {}
    for seed in spec.seeds:
        bench, cfg, result = run_one(spec.benchmark, spec.train, spec.preset, seed)
        write_log_csv(result.logs, out / f"seed{seed}.csv", config_hash=chash)
        final = result.reports[-1]
        _write_json(
            out / f"seed{seed}.json",
            {
                "preset": spec.preset,
                "seed": seed,
                "config_hash": chash,
                "benchmark_hash": bhash,
                "benchmark_digest": bench.digest(),
                "report": final.to_dict(),
            },
        )
        model.save_checkpoint(
            out / f"seed{seed}.ckpt",
            result.state.encoder,
            epoch=cfg.total_epochs,
            config_hash=chash,
            extra={"seed": seed, "preset": spec.preset},
        )
        per_seed[seed] = {"mAP": final.mAP, "rank1": final.rank1}
        manifest["done"].append(seed)
        _write_json(out / "MANIFEST.json", manifest)

    aggregate = {
        "preset": spec.preset,
        "config_hash": chash,
        "benchmark_hash": bhash,
        "seeds": list(spec.seeds),
        "per_seed": {str(k): v for k, v in per_seed.items()},
        "median_mAP": statistics.median(v["mAP"] for v in per_seed.values()),
        "median_rank1": statistics.median(v["rank1"] for v in per_seed.values()),
    }
    _write_json(out / "aggregate.json", aggregate)
    manifest["complete"] = True
    _write_json(out / "MANIFEST.json", manifest)
    return aggregate


def compare_presets(paths, baseline: str = "dbscan", fmt: str = "markdown") -> str:
    """Table of per-preset medians and their deltas against ``baseline``."""
    aggs = []
    for p in paths:
        if not os.path.exists(p):
            raise FileNotFoundError(f"aggregate file {p} not found")
        with open(p) as fh:
            aggs.append(json.load(fh))
    if len(aggs) < 2:
        raise ConfigError("compare needs at least two aggregate files")
    hashes = {a["benchmark_hash"] for a in aggs}
    if len(hashes) > 1:
        raise ConfigError(f"aggregates come from different benchmarks: {sorted(hashes)}")
    base = next((a for a in aggs if a["preset"] == baseline), aggs[0])
    rows = [
        (
            a["preset"],
            a["median_mAP"],
            a["median_rank1"],
            a["median_mAP"] - base["median_mAP"],
            a["median_rank1"] - base["median_rank1"],
        )
        for a in aggs
    ]
    if fmt == "csv":
        lines = ["preset,median_mAP,median_rank1,delta_mAP,delta_rank1"]
        lines += [f"{r[0]},{r[1]:.6f},{r[2]:.6f},{r[3]:+.6f},{r[4]:+.6f}" for r in rows]
    else:
        lines = [
            f"| preset | mAP | rank-1 | ΔmAP vs {base['preset']} | Δrank-1 |",
            "|---|---|---|---|---|",
        ]
        lines += [f"| {r[0]} | {r[1]:.4f} | {r[2]:.4f} | {r[3]:+.4f} | {r[4]:+.4f} |" for r in rows]
    return "\n".join(lines) + "\n"


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
