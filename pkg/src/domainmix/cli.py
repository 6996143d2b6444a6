"""Command line entry point: ``domainmix run | eval | gen-benchmark | compare``."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import replace

from . import model
from .errors import DimensionError, DomainMixError
from .evaluation import evaluate
from .experiment import PRESETS, RunSpec, compare_presets, load_config, run_experiment
from .synthgen import dump_csv, generate, load_csv

log = logging.getLogger("domainmix")

EXIT_CONFIG = 2
EXIT_FILE = 3


def _seeds(text: str) -> tuple:
    try:
        seeds = tuple(int(s) for s in text.replace(" ", "").split(",") if s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("need at least one seed")
    return seeds


def _presets(text: str) -> list:
    names = list(PRESETS) if text == "all" else [p for p in text.split(",") if p]
    unknown = [p for p in names if p not in PRESETS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown preset(s) {unknown}; choose from {list(PRESETS)} or 'all'")
    return names


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="domainmix", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one or more presets over a list of seeds")
    r.add_argument("--config", help="INI file with [benchmark] [train] [loss] [cluster] [criteria] sections")
    r.add_argument("--preset", type=_presets, default=["domainmix_unlabeled"],
                   help="preset name, comma list, or 'all'")
    r.add_argument("--seeds", type=_seeds, default=(0,), help="e.g. 0,1,2,3,4")
    r.add_argument("--out", default="runs", help="output directory")

    e = sub.add_parser("eval", help="evaluate a saved encoder on a benchmark CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--benchmark", required=True, help="CSV written by gen-benchmark")
    e.add_argument("--out", help="write the report JSON here instead of stdout")
    e.add_argument("--per-query", help="optional per-query AP CSV")

    g = sub.add_parser("gen-benchmark", help="write the synthetic benchmark as CSV")
    g.add_argument("--spec", help="INI file; only its [benchmark] section is read")
    g.add_argument("--seed", type=int, help="override the spec seed")
    g.add_argument("--out", required=True)
    g.add_argument("--reveal-hidden", action="store_true", help="also write B's ground-truth identities")

    c = sub.add_parser("compare", help="table of medians and deltas from aggregate.json files")
    c.add_argument("aggregates", nargs="+")
    c.add_argument("--baseline", default="dbscan")
    c.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    return ap


def cmd_run(args) -> int:
    bench, train = load_config(args.config)
    for preset in args.preset:
        agg = run_experiment(RunSpec(bench, train, preset, args.out, args.seeds))
        print(f"{preset:22s} median mAP {agg['median_mAP']:.4f}  rank-1 {agg['median_rank1']:.4f}")
    return 0


def cmd_eval(args) -> int:
    bench = load_csv(args.benchmark)
    params, header = model.load_checkpoint(args.checkpoint)
    enc = {k: v for k, v in params.items() if k.startswith("enc.")}
    if not enc:
        raise DimensionError(f"{args.checkpoint} holds no encoder weights")
    d_in = bench.query_C.X.shape[1]
    if enc["enc.W0"].shape[0] != d_in:
        raise DimensionError(f"checkpoint expects {enc['enc.W0'].shape[0]}-d inputs, benchmark has {d_in}")
    report = evaluate(enc, bench.query_C, bench.gallery_C)
    extra = {"config_hash": header.get("config_hash", ""), "checkpoint": str(args.checkpoint)}
    if args.out:
        report.to_json(args.out, **extra)
    else:
        print(json.dumps({**report.to_dict(), **extra}, indent=2))
    if args.per_query:
        report.dump_per_query(args.per_query, bench.query_C.ids)
    return 0


def cmd_gen(args) -> int:
    spec, _ = load_config(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    dump_csv(generate(spec), args.out, reveal_hidden=args.reveal_hidden)
    print(f"wrote {args.out} (benchmark digest {spec.digest()})")
    return 0


def cmd_compare(args) -> int:
    sys.stdout.write(compare_presets(args.aggregates, baseline=args.baseline, fmt=args.format))
    return 0


def _thread_cap():
    raw = os.environ.get("DOMAINMIX_THREADS")
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(raw)))


COMMANDS = {"run": cmd_run, "eval": cmd_eval, "gen-benchmark": cmd_gen, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_cap():
            return COMMANDS[args.command](args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"domainmix: {exc}", file=sys.stderr)
        return EXIT_FILE
    except (DomainMixError, ValueError) as exc:
        print(f"domainmix: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
