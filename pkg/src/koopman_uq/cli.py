"""Command-line entry point: ``koopman-uq <stage> [options]``.

Exit codes: 0 success, 2 invalid input or stale artifact, 3 numerical
failure, 4 file I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import load_config
from .errors import ArtifactIOError, NumericalError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "KOOPMAN_UQ_THREADS"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON pipeline config")
    common.add_argument("--out-dir", type=Path, help="run directory")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--hidden-size", type=int, choices=(20, 60, 100))
    common.add_argument("--num-traj", type=int, help="number of simulated trajectories")
    common.add_argument("--epochs", type=int, help="autoencoder iteration cap")
    common.add_argument("--force", action="store_true",
                        help="skip stale-artifact checks")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="koopman-uq",
                                description="Koopman autoencoder with certified "
                                            "reconstruction error bounds")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "simulate the training dataset",
        "train-ae": "train the autoencoder",
        "fit-koopman": "fit the lifted linear model and residual bound",
        "fit-edmd": "fit the RBF baseline",
        "certify": "certify the decoder's Lipschitz constant",
        "rpi": "compute the invariant error set",
        "evaluate": "roll out the test input and write report files",
        "all": "run every stage in order",
    }
    for name, h in helps.items():
        sp = sub.add_parser(name, parents=[common], help=h)
        if name == "certify":
            sp.add_argument("--model", type=Path,
                            help="autoencoder JSON to certify instead of the run's")
    return p


def _run(args) -> int:
    cfg = load_config(args.config).with_overrides(
        seed=args.seed, hidden_size=args.hidden_size, num_traj=args.num_traj,
        epochs=args.epochs,
        out_dir=str(args.out_dir) if args.out_dir is not None else None)
    out = Path(cfg.paths.out_dir)
    if args.command != "evaluate" and args.command != "all":
        out.mkdir(parents=True, exist_ok=True)
    if args.command == "all":
        summary = pipeline.run_all(cfg, out, args.force)
    elif args.command == "certify":
        pipeline.run_certify(cfg, out, args.force, args.model)
        summary = None
    else:
        result = pipeline.STAGES[args.command](cfg, out, args.force)
        summary = result if isinstance(result, dict) else None
    if summary is not None:
        brief = {k: summary[k] for k in ("L_star", "r", "containment_fraction",
                                         "premise_fraction")}
        print(json.dumps(brief))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        print(f"error: {THREADS_ENV} must be a positive integer", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        with threadpool_limits(limits=limit):
            return _run(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ArtifactIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
