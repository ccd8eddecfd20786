"""Command line entry point: ``dpfilter <subcommand> [--config PATH] [--seed N] [--trials N] [--out DIR]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys

from .config import KINDS, ExperimentConfig, default_config, load_config
from .errors import ConfigError, DPFilterError
from .experiments import run_experiment
from .reproduce import SUITES, render_report, reproduce

LOG_ENV = "DPFILTER_LOG_LEVEL"
log = logging.getLogger("dpfilter")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpfilter", description="Differentially private filtering experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        s = sub.add_parser(kind, help=f"run the {kind} experiment")
        s.add_argument("--config", help="TOML or JSON configuration file")
        s.add_argument("--seed", type=int, help="base seed (required without --config)")
        s.add_argument("--trials", type=int, help="override the number of Monte Carlo trials")
        s.add_argument("--out", help="directory for summary.json and trace CSVs")
    r = sub.add_parser("reproduce", help="run the pinned reproduction suites and report pass/fail")
    r.add_argument("--suite", choices=SUITES + ("all",), default="all")
    r.add_argument("--config", help="unused; accepted for interface uniformity")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--trials", type=int, help="override the pinned trial counts")
    r.add_argument("--out", help="directory for report.md and per-suite bundles")
    r.add_argument("--strict", action="store_true", help="exit with status 1 when any check fails")
    return p


def _resolve_config(kind: str, args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config, kind)
        if cfg.kind != kind:
            raise ConfigError("kind", f"file describes a {cfg.kind} experiment, not {kind}")
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
    else:
        if args.seed is None:
            raise ConfigError("seed", "pass --seed or a configuration file with a seed")
        cfg = default_config(kind, args.seed)
    if args.trials is not None:
        if args.trials < 1:
            raise ConfigError("trials", "must be at least 1")
        cfg = dataclasses.replace(cfg, trials=args.trials)
    if args.out:
        cfg = dataclasses.replace(cfg, out=args.out)
    return cfg


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}" if math.isfinite(v) else "nan"
    return "-" if v is None else str(v)


def _print_bundle(bundle) -> None:
    print(f"{bundle.kind} (config {bundle.provenance['config_hash']})")
    for r in bundle.records:
        if "empirical" in r:
            print(f"  {r['name']:<28} analytic {_fmt(r['analytic']):>12}  empirical {_fmt(r['empirical']):>12}"
                  f"  se {_fmt(r['stderr']):>10}  trials {_fmt(r['trials'])}")
        elif "value" in r:
            print(f"  {r['name']:<28} {_fmt(r['value'])}")
        else:
            rest = ", ".join(f"{k}={_fmt(v)}" for k, v in r.items() if k != "name")
            print(f"  {r['name']:<28} {rest}")


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "reproduce":
            suites = SUITES if args.suite == "all" else (args.suite,)
            results = reproduce(suites, args.seed, args.trials, args.out)
            print(render_report(results), end="")
            failed = any(not c.passed for cs in results.values() for c in cs)
            return 1 if (failed and args.strict) else 0
        cfg = _resolve_config(args.command, args)
        bundle = run_experiment(cfg)
        _print_bundle(bundle)
        return 0
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except DPFilterError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
