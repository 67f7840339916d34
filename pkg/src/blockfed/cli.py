"""Command-line front end: single runs and parameter sweeps.

Everything the CLI does goes through the library API, so scripted use gets
identical results. Exit codes: 0 ok, 2 config error, 3 IO error, 4 at least
one sweep run failed.
"""

import argparse
import sys
import time

from .config import ConfigError, ExperimentConfig, load_config, load_sweep, with_overrides
from .outputs import summary_row, write_run, write_sweep_summary
from .simulation import run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PARTIAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockfed",
        description="Discrete-event simulator of asynchronous federated learning over a blockchain",
    )
    parser.add_argument("--config", metavar="PATH", help="experiment config (YAML)")
    parser.add_argument("--sweep", metavar="PATH", help="sweep spec (YAML); overrides --config")
    parser.add_argument("--seed", type=int, metavar="INT", help="override the config seed")
    parser.add_argument("--out", metavar="DIR", help="override the output directory")
    parser.add_argument("--trace", action="store_true", help="export the event trace")
    parser.add_argument(
        "--synthetic", action="store_true", help="force the synthetic dataset"
    )
    return parser


def _apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.trace:
        overrides["trace"] = True
    if args.synthetic:
        overrides["data_source"] = "synthetic"
    return with_overrides(cfg, **overrides) if overrides else cfg


def _run_one(cfg: ExperimentConfig) -> list:
    started = time.time()
    result = run_experiment(cfg)
    run_dir = write_run(result, cfg.out_dir)
    print(
        f"[{result.run_id}] blocks={len(result.metrics)} stale={result.stale_rate:.4f}"
        + (f" test_acc={result.final_test_acc:.4f}" if result.final_test_acc is not None else "")
        + f" ({time.time() - started:.1f}s) -> {run_dir}"
    )
    return summary_row(result)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.sweep:
            spec = load_sweep(args.sweep)
            configs = [_apply_flags(cfg, args) for cfg in spec.expand()]
        else:
            base = load_config(args.config) if args.config else ExperimentConfig()
            configs = [_apply_flags(base, args)]
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    failures = 0
    rows = []
    for cfg in configs:
        try:
            rows.append(_run_one(cfg))
        except OSError as exc:
            print(f"io error: {exc}", file=sys.stderr)
            if not args.sweep:
                return EXIT_IO
            failures += 1
        except Exception as exc:  # a sweep keeps going past individual failures
            if not args.sweep:
                raise
            print(f"run failed ({cfg.seed}): {exc}", file=sys.stderr)
            failures += 1

    if args.sweep:
        try:
            path = write_sweep_summary(rows, configs[0].out_dir)
        except OSError as exc:
            print(f"io error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"sweep complete: {len(rows)}/{len(configs)} runs -> {path}")
        if failures:
            return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
