"""Command-line entry point.

    pfdlab run <config.toml> [--seed N] [--out-dir DIR]
    pfdlab ablate-cfg <config.toml> [--seed N] [--out-dir DIR]
    pfdlab plot <snapshot.csv> <out.svg> [--config config.toml]

Exit codes: 0 success, 2 invalid config or input, 3 divergence.
Set ``PFDLAB_LOG_LEVEL`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

from .config import ConfigError, load_config
from .plotting import plot_ensemble
from .records import read_snapshot

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("pfdlab")


def _setup_logging() -> None:
    level = os.environ.get("PFDLAB_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfdlab", description="Probability-flow distillation toy experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run the configured methods"), ("ablate-cfg", "sweep (gamma_fwd, gamma_rev) pairs with PFD")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config")
        sp.add_argument("--seed", type=int, default=None, help="override the config's seed")
        sp.add_argument("--out-dir", default=None, help="override the config's output directory")
    sp = sub.add_parser("plot", help="render a snapshot CSV as SVG")
    sp.add_argument("snapshot")
    sp.add_argument("out")
    sp.add_argument("--config", default=None, help="config providing the target outline and bounds")
    sp.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    sp.add_argument("--out-dir", default=None, help=argparse.SUPPRESS)
    return p


def _plot(args) -> int:
    try:
        _, pos = read_snapshot(args.snapshot)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    target, bounds, size, point = None, (-4.5, 4.5), 320, 1.2
    if args.config:
        cfg = load_config(args.config, seed=0 if args.seed is None else args.seed)
        target, bounds, size, point = cfg.target, cfg.plot.bounds, cfg.plot.panel_px, cfg.plot.point_size
    try:
        plot_ensemble(pos, target, bounds, args.out, size, point)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc.strerror}", file=sys.stderr)
        return EXIT_INVALID
    print(args.out)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    try:
        if args.command == "plot":
            return _plot(args)
        from .experiment import ablate_cfg, run_experiment

        cfg = load_config(args.config, seed=args.seed, out_dir=args.out_dir)
        out = args.out_dir if args.out_dir is not None else cfg.out_dir
        if args.command == "run":
            manifest = run_experiment(cfg, out)
        else:
            manifest, _ = ablate_cfg(cfg, out)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(os.path.join(out, "manifest.json"))
    if manifest.status != "ok":
        failed = [k for k, r in manifest.methods.items() if r.status != "ok"]
        print(f"diverged: {', '.join(failed)}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
