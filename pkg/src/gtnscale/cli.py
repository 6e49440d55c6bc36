"""Command line: ``gtnscale run | replay | fit``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .errors import GtnError
from .experiment import load_config, refit, replay, run_experiment


def _summary(fits: dict, refusals: list) -> None:
    for name, f in sorted(fits.items()):
        coefs = ", ".join(f"{k}={v:.6g}" for k, v in f.coefficients.items())
        print(f"{name}: {coefs}  R2={f.r_squared:.4f}")
    for r in refusals:
        print(f"refused {r['fit']}: {r['reason']}")


def _run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    result = run_experiment(cfg, out=args.out, workers=args.workers)
    print(f"config {result.config_hash[:12]}  wrote {result.out}")
    _summary(result.fits.fits, result.fits.refusals)
    for c in result.fits.comparisons:
        mark = "agree" if c["agree"] else "DISAGREE"
        print(f"compose_pq {c['split']}/{c['pairing']} M={c['M']}: {mark}")
    return 0


def _replay(args) -> int:
    rep = replay(args.dir)
    for w in rep.warnings:
        print(f"warning: {w}")
    for issue in rep.issues:
        print(f"FAIL {issue}")
    print(f"{rep.fits_checked} fits checked, {len(rep.issues)} issue(s)")
    return 0 if rep.ok else 1


def _fit(args) -> int:
    bundle = refit(args.dir)
    _summary(bundle.fits, bundle.refusals)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gtnscale", description="NLL scaling experiments with generative MPS models")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run a sweep from a YAML config")
    run.add_argument("--config", required=True, metavar="PATH")
    run.add_argument("--out", metavar="DIR", help="bundle directory (default: config 'output', else ./results)")
    run.add_argument("--workers", type=int, metavar="K", help="parallel worker processes")
    run.add_argument("--seed", type=int, metavar="S", help="override the config's base seed")
    run.set_defaults(func=_run)

    rp = sub.add_parser("replay", help="verify a bundle and recompute its fits")
    rp.add_argument("dir", metavar="DIR")
    rp.set_defaults(func=_replay)

    ft = sub.add_parser("fit", help="recompute fits from a bundle's curve CSVs")
    ft.add_argument("dir", metavar="DIR")
    ft.set_defaults(func=_fit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except GtnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
