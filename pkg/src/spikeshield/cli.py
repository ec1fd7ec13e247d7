"""Command-line entry point: ``spikeshield <verb> [--config PATH] [--preset NAME] ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import numpy as np

from .config import PRESETS, load_config
from .errors import SpikeShieldError, StageError
from .experiment import STAGES, Experiment

log = logging.getLogger("spikeshield")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikeshield",
                                     description="Spiking purifier and detector experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value overrides on the preset")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in STAGES:
        sub.add_parser(verb, parents=[common], help=f"run the {verb} stage")
    sub.add_parser("run", parents=[common], help="run every stage in order")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return parser


def resolve_config(args):
    cfg = PRESETS[args.preset]()
    if args.config:
        cfg = load_config(args.config, cfg)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, out=args.out)
    return cfg


def _summary(stage: str, result, exp: Experiment) -> str:
    if stage in ("train-classifier", "train-purifier"):
        return f"{stage}: final loss {result[-1]:.5f}" if result else f"{stage}: no epochs"
    if stage == "calibrate":
        return f"calibrate: tau = {result:.6f}"
    if stage == "evaluate":
        lines = [f"{'input':<12} {'undefended':>10} {'purify':>8} {'route':>8} {'flagged':>8}"]
        for r in result.rows:
            lines.append(f"{r.attack:<12} {r.undefended:>10.3f} {r.always_purify:>8.3f} "
                         f"{r.detect_and_route:>8.3f} {r.detection_rate:>8.3f}")
        return "\n".join(lines)
    if stage == "histogram":
        return "histogram: " + ", ".join(f"{k} median m {np.median(v):.4f}"
                                          for k, v in result["m"].items())
    return f"sweep: {len(result)} rows"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.verb == "show-config":
            print(f"# config hash {cfg.hash()}")
            print(cfg.dumps(), end="")
            return 0
        exp = Experiment(cfg)
        for stage in STAGES if args.verb == "run" else (args.verb,):
            result = exp.run_stage(stage)
            if not args.quiet:
                print(_summary(stage, result, exp))
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SpikeShieldError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
