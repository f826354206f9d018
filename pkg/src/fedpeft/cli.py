"""Command line: ``run``, ``sweep``, ``compare`` and ``config``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import format_config, load_config
from .errors import FedPeftError
from .experiment import compare_report, format_table, run_single, run_sweep


def _spec(args):
    spec = load_config(args.config, args.overrides)
    if getattr(args, "out", None):
        spec = replace(spec, run=replace(spec.run, out=args.out))
    if getattr(args, "seed", None) is not None:
        spec = replace(spec, run=replace(spec.run, seeds=(args.seed,)))
    return spec


def cmd_run(args) -> int:
    spec = _spec(args)
    seed = spec.run.seeds[0]
    summary = run_single(spec, seed, spec.run.out)
    print(
        f"{summary['algorithm']} seed={seed} final_accuracy={summary['final_accuracy']:.4f} "
        f"gbits={summary['gbits']:.4f} -> {spec.run.out}"
    )
    return 0


def cmd_sweep(args) -> int:
    spec = _spec(args)
    code = run_sweep(spec, spec.run.out)
    body = json.loads((Path(spec.run.out) / "summary.json").read_text())
    if "final_accuracy" in body:
        fa = body["final_accuracy"]
        print(f"{body['algorithm']} seeds={body['completed']} mean={fa['mean']:.4f} std={fa['std']:.4f} best3={fa['best3_mean']:.4f}")
    if body["failed"]:
        print(f"failed seeds: {sorted(body['failed'])}", file=sys.stderr)
    return code


def cmd_compare(args) -> int:
    report = compare_report(args.dirs, args.mode)
    print(format_table(report), end="")
    if args.out:
        Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_config(args) -> int:
    print(format_config(load_config(args.config, args.overrides)), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpeft", description="Federated PEFT simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, with_seed in (("run", cmd_run, True), ("sweep", cmd_sweep, False), ("config", cmd_config, False)):
        sp = sub.add_parser(name)
        sp.add_argument("config", nargs="?", help="config file (omit for defaults)")
        sp.add_argument("overrides", nargs="*", help="key=value overrides")
        if with_seed:
            sp.add_argument("--seed", type=int, help="seed (default: first of run.seeds)")
        if name != "config":
            sp.add_argument("--out", help="output directory (default: run.out)")
        sp.set_defaults(func=fn)
    cp = sub.add_parser("compare")
    cp.add_argument("dirs", nargs="+")
    cp.add_argument("--mode", choices=("budget", "rounds"), default="rounds")
    cp.add_argument("--out", help="also write the table as JSON here")
    cp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    # a bare key=value in the config slot is an override, not a file
    if getattr(args, "config", None) and "=" in args.config and not Path(args.config).exists():
        args.overrides = [args.config, *args.overrides]
        args.config = None
    try:
        return args.func(args)
    except FedPeftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
