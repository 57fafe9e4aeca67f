"""Command line entry point: ``metasg <command> --config FILE [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import MetaSGError

log = logging.getLogger("metasg")

_DEFAULT_STAGES = {"pretrain": "pretrain", "adapt": "adapt", "evaluate": "evaluate",
                   "run": "pretrain,adapt,evaluate"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metasg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        sp.add_argument("--out", default=None, help="output directory (overrides output.dir)")

    for name in ("pretrain", "adapt", "evaluate", "run"):
        sp = sub.add_parser(name, help=f"pipeline stages (default: {_DEFAULT_STAGES[name]})")
        common(sp)
        sp.add_argument("--stages", default=None, help="comma-separated subset of pretrain,adapt,evaluate")
        sp.add_argument("--init", choices=("checkpoint", "random"), default="checkpoint")
        sp.add_argument("--checkpoint", default=None, help="explicit checkpoint file")
        sp.add_argument("--no-plots", action="store_true")

    sp = sub.add_parser("matrix", help="baseline defense x attack table")
    common(sp)
    sp.add_argument("--workers", type=int, default=None, help="process count (default METASG_WORKERS or 1)")
    sp.add_argument("--no-plots", action="store_true")

    sp = sub.add_parser("oracle", help="exact-oracle comparisons; nonzero exit on any failure")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="oracle_report")
    sp.add_argument("--instances", type=int, default=20)

    sp = sub.add_parser("plot", help="render SVGs from a metrics CSV")
    sp.add_argument("metrics_csv")
    sp.add_argument("--out", default=None)
    return p


def _config(args) -> ExperimentConfig:
    return load_config(args.config).with_overrides(seed=args.seed, out=args.out)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except MetaSGError as exc:
        log.error("%s", exc)
        return 2


def _dispatch(args) -> int:
    from . import pipeline

    if args.command in _DEFAULT_STAGES:
        cfg = _config(args)
        stages = (args.stages or _DEFAULT_STAGES[args.command]).split(",")
        art = pipeline.run_pipeline(cfg, [s.strip() for s in stages if s.strip()], init=args.init,
                                    checkpoint=args.checkpoint, plots=False if args.no_plots else None)
        log.info("artifact in %s (config_sha=%s)", art.out_dir, art.config_sha)
        for k, v in art.summary.items():
            print(f"{k}={v:.6g}")
        return 0
    if args.command == "matrix":
        cfg = _config(args)
        path = pipeline.run_baseline_matrix(cfg, workers=args.workers, plots=False if args.no_plots else None)
        print(path.read_text(), end="")
        return 0
    if args.command == "oracle":
        from .oracles import oracle_suite

        report, code = oracle_suite(args.seed, args.instances, Path(args.out))
        print(f"report: {report}")
        return code
    if args.command == "plot":
        from .plotting import emit_plots

        out = Path(args.out) if args.out else Path(args.metrics_csv).parent / "plots"
        for p in emit_plots(args.metrics_csv, out):
            print(p)
        return 0
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
