"""Command line: ``mlposc run <experiment> [--config PATH] [--out DIR] [--seed U64]``.

The output directory defaults to ``$MLPOSC_OUT/<experiment>`` when the
environment variable is set, else ``./out/<experiment>``.  Exit status is 0
on success, 2 for a bad experiment name or configuration, and 3 when a
solver fails (the manifest then has ``status: failed`` and lists the
partial artifacts).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import io
from ._validation import ProblemError
from .config import EXPERIMENTS, ConfigError, parse_config, resolve
from .experiments import RUNNERS
from .lqg import IntegrationError
from .pde import StabilityError

log = logging.getLogger("mlposc")

OUT_ENV = "MLPOSC_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


def output_dir(experiment, out=None):
    if out is not None:
        return Path(out)
    base = os.environ.get(OUT_ENV)
    return Path(base) / experiment if base else Path("out") / experiment


def run_experiment(name, config_path=None, out_dir=None, seed=None):
    """Run one experiment; returns ``(exit_status, manifest_path or None)``."""
    if name not in RUNNERS:
        log.error("unknown experiment %r; expected one of %s", name, ", ".join(EXPERIMENTS))
        return EXIT_CONFIG, None
    try:
        if config_path is None:
            cfg, defaults = resolve(name)
        else:
            cfg, defaults = parse_config(config_path, name)
        if seed is not None:
            if not 0 <= int(seed) < 2**64:
                raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
            if "sim" in cfg:
                cfg["sim"]["seed"] = int(seed)
                defaults = [d for d in defaults if d != "sim.seed"]
    except (ConfigError, ProblemError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG, None
    out = output_dir(name, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_seed = cfg.get("sim", {}).get("seed", 0)
    files = []
    meta = {"defaults_used": defaults, "seed": run_seed}
    try:
        summary = RUNNERS[name](cfg, out, run_seed, files)
    except ProblemError as exc:
        log.error("invalid problem: %s", exc)
        io.write_manifest(out, name, files, cfg, status="invalid", extra={**meta, "error": str(exc)})
        return EXIT_CONFIG, out / "manifest.json"
    except (IntegrationError, StabilityError, FloatingPointError, ArithmeticError) as exc:
        log.error("solver failure: %s", exc)
        path = io.write_manifest(out, name, files, cfg, status="failed", extra={**meta, "error": str(exc)})
        return EXIT_SOLVER, path
    path = io.write_manifest(out, name, files, cfg, extra={**meta, "summary": summary})
    log.info("wrote %d artifacts and %s", len(files), path)
    return EXIT_OK, path


def build_parser():
    parser = argparse.ArgumentParser(prog="mlposc", description="Memory-limited partially observed control experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a named experiment")
    run.add_argument("experiment", help=f"one of: {', '.join(EXPERIMENTS)}")
    run.add_argument("--config", type=Path, default=None, help="YAML file with model/grid/sweep/sim sections")
    run.add_argument("--out", type=Path, default=None, help=f"output directory (default ${OUT_ENV}/<experiment>)")
    run.add_argument("--seed", type=int, default=None, help="master seed for path sampling")
    run.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    status, _ = run_experiment(args.experiment, args.config, args.out, args.seed)
    return status


if __name__ == "__main__":
    sys.exit(main())
