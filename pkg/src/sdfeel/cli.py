"""Command-line experiment runner.

Subcommands: ``run`` executes the configured mode(s) and writes traces plus a
summary; ``validate`` checks a config and echoes its resolved form; ``bound``
evaluates the convergence-bound calculator for a config; ``report`` renders
figures from a run directory's traces.

Exit codes: 0 success, 1 validation error, 2 diverged run, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ExperimentConfig, override, parse_config, echo_lines
from .errors import ConfigurationError, DivergedRunError
from .experiment import bound_report, run_experiment

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_DIVERGED = 2
EXIT_IO = 3

OUTPUT_ROOT_ENV = "SDFEEL_OUTPUT_ROOT"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdfeel",
                                     description="Asynchronous federated edge learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment config")
    run.add_argument("config", type=Path)
    run.add_argument("--mode", choices=("async", "sync", "both"), default=None,
                     help="override run.mode")
    run.add_argument("--seed", type=int, default=None, help="override run.seed")
    run.add_argument("--out", type=Path, default=None, help="output directory")
    run.add_argument("--replicates", type=int, default=1,
                     help="number of independently seeded replicates")
    run.add_argument("--parallel", type=int, default=1,
                     help="worker processes for replicates")
    run.add_argument("--figures", action="store_true",
                     help="render report figures after the run")

    validate = sub.add_parser("validate", help="validate a config and echo it")
    validate.add_argument("config", type=Path)

    bound = sub.add_parser("bound", help="evaluate the convergence-bound calculator")
    bound.add_argument("config", type=Path)

    report = sub.add_parser("report", help="render figures from a run directory")
    report.add_argument("run_dir", type=Path)
    return parser


def _default_out_dir(config: ExperimentConfig, config_path: Path) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / config_path.stem


def _run_one(config: ExperimentConfig, out_dir: Path, run_id: str, figures: bool) -> None:
    run_experiment(config, out_dir, run_id=run_id)
    if figures:
        from .plots import render_report
        render_report(out_dir)


def _cmd_run(args) -> int:
    config = parse_config(args.config)
    config = override(config, mode=args.mode, seed=args.seed,
                      output_dir=str(args.out) if args.out else None)
    out_dir = _default_out_dir(config, args.config)
    run_id = args.config.stem
    if args.replicates < 1 or args.parallel < 1:
        raise ConfigurationError("--replicates and --parallel must be >= 1")
    if args.replicates == 1:
        _run_one(config, out_dir, run_id, args.figures)
        print(f"wrote {out_dir}/summary.json")
        return EXIT_OK
    jobs = []
    for rep in range(args.replicates):
        rep_config = override(config, seed=config.seed + rep)
        jobs.append((rep_config, out_dir / f"rep{rep:03d}", run_id, args.figures))
    if args.parallel == 1:
        for job in jobs:
            _run_one(*job)
    else:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futures = [pool.submit(_run_one, *job) for job in jobs]
            for future in futures:
                future.result()
    print(f"wrote {args.replicates} replicates under {out_dir}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    config = parse_config(args.config)
    print("\n".join(echo_lines(config)))
    return EXIT_OK


def _cmd_bound(args) -> int:
    config = parse_config(args.config)
    print(json.dumps(bound_report(config), sort_keys=True, indent=2))
    return EXIT_OK


def _cmd_report(args) -> int:
    from .plots import render_report
    for path in render_report(args.run_dir):
        print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "validate": _cmd_validate,
                "bound": _cmd_bound, "report": _cmd_report}
    try:
        return handlers[args.command](args)
    except ConfigurationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergedRunError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
