"""
fedbench - Command Line
Run reference experiments, compare run sets, list presets and generate data
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger

from core.config import (
    ConfigError,
    build_config,
    load_config,
    load_workload_config,
    override_config,
)
from core.data import save_csv, split_vertical
from core.presets import describe_presets, preset_names
from core.runner import load_workload, report, run
from utils.export import ExportManager
from utils.logging_setup import setup_logging

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def _load(target: str):
    """A YAML path, or the bare name of a preset"""
    if not Path(target).exists() and target in preset_names():
        return build_config({"preset": target, "name": target})
    return load_config(target)


def cmd_run(args) -> int:
    config = _load(args.config)
    updates = {"repetitions": args.repetitions, "seed": args.seed}
    updates = {k: v for k, v in updates.items() if v is not None}
    if updates:
        config = override_config(config, updates)
    records = run(
        config, output_dir=args.output_dir, workers=args.workers, progress=not args.no_progress
    )
    print(ExportManager.summary_text(config.label, records))
    return EXIT_FAILED if any(r.status != "ok" for r in records) else EXIT_OK


def cmd_report(args) -> int:
    means, comparisons = report(args.dirs, rope=args.rope, rho=args.rho, out_path=args.out)
    print(ExportManager.report_text(means, comparisons))
    return EXIT_OK


def cmd_list_presets(args) -> int:
    for entry in describe_presets():
        print(f"{entry['name']:<26} {entry['description']}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    workload, seed = load_workload_config(args.workload)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError([f"seed: must be >= 0, got {args.seed}"])
        seed = args.seed
    ds = load_workload(workload, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if workload.is_vertical:
        width_a = workload.party_a_features or ds.n_features // 2
        party_a, party_b = split_vertical(ds, width_a, workload.overlap, seed)
        for suffix, party in (("a", party_a), ("b", party_b)):
            path = out.with_name(f"{out.stem}-{suffix}{out.suffix}")
            save_csv(party, str(path))
            logger.info(f"wrote {len(party)} rows to {path}")
    else:
        save_csv(ds, str(out))
        logger.info(f"wrote {len(ds)} rows to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbench", description="Deterministic desk-scale federated learning benchmark"
    )
    parser.add_argument("--log-level", default="INFO", help="stderr log level")
    parser.add_argument("--log-file", default=None, help="also log to this file at DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run all repetitions of a config or preset")
    p.add_argument("config", help="YAML config path or preset name")
    p.add_argument("--output-dir", default=None, help="overrides output_dir from the config")
    p.add_argument("--workers", type=int, default=1, help="parallel repetition processes")
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="base seed")
    p.add_argument("--no-progress", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="compare run directories")
    p.add_argument("dirs", nargs="+", help="run directories holding summary.csv")
    p.add_argument("--rope", type=float, default=None, help="final-metric rope (default 0.01)")
    p.add_argument("--rho", type=float, default=0.0, help="correlation for the t-test")
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("list-presets", help="show the reference experiments")
    p.set_defaults(func=cmd_list_presets)

    p = sub.add_parser("gen-data", help="write a workload to CSV")
    p.add_argument("workload", help="YAML workload (or full config) path")
    p.add_argument("out", help="output CSV path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, args.log_file)
    try:
        return args.func(args)
    except ConfigError as exc:
        for error in exc.errors:
            logger.error(error)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
