"""
Result Export
JSONL round logs, CSV ledgers and summaries, and plain-text report tables
"""

import json
import math
from pathlib import Path
from typing import Iterable, List, Optional

import pandas as pd

from models import RoundResult, RunRecord
from core.stats import mean_std

AGGREGATE_SEED = "mean±std"
SUMMARY_COLUMNS = [
    "final_metric",
    "convergence_rounds",
    "throughput",
    "overhead",
    "uplink_ratio",
    "eps_spent",
]


class ExportManager:
    """Write run artifacts; every file is a pure function of the run, no timestamps"""

    @staticmethod
    def round_log_jsonl(rounds: Iterable[RoundResult]) -> str:
        lines = [json.dumps(r.to_record(), sort_keys=True) for r in rounds]
        return "\n".join(lines) + "\n" if lines else ""

    @staticmethod
    def write_round_log(path: Path, rounds: Iterable[RoundResult]) -> None:
        Path(path).write_text(ExportManager.round_log_jsonl(rounds), encoding="utf-8")

    @staticmethod
    def write_rows(path: Path, rows: List[dict]) -> None:
        pd.DataFrame(rows).to_csv(path, index=False, encoding="utf-8")

    @staticmethod
    def aggregate_row(records: List[RunRecord]) -> dict:
        """'mean ± std' over the successful runs"""
        ok = [r for r in records if r.status == "ok"]
        row = {"preset": records[0].preset if records else "", "seed": AGGREGATE_SEED}
        for column in SUMMARY_COLUMNS:
            values = [getattr(r, column) for r in ok if getattr(r, column) is not None]
            if values:
                mean, std = mean_std(values)
                row[column] = f"{mean:.6g} ± {std:.3g}"
            else:
                row[column] = None
        row["status"] = f"{len(ok)}/{len(records)} ok"
        return row

    @staticmethod
    def summary_frame(records: List[RunRecord]) -> pd.DataFrame:
        rows = [r.to_row() for r in sorted(records, key=lambda r: r.seed)]
        if records:
            rows.append(ExportManager.aggregate_row(records))
        return pd.DataFrame(rows)

    @staticmethod
    def write_summary(path: Path, records: List[RunRecord]) -> None:
        ExportManager.summary_frame(records).to_csv(path, index=False, encoding="utf-8")

    @staticmethod
    def curve_frame(records: List[RunRecord]) -> pd.DataFrame:
        """Validation metric per round, long format, successful seeds only"""
        rows = [
            {"preset": r.preset, "seed": r.seed, "round": i, "metric": value}
            for r in sorted(records, key=lambda r: r.seed)
            if r.status == "ok"
            for i, value in enumerate(r.curve, start=1)
        ]
        return pd.DataFrame(rows, columns=["preset", "seed", "round", "metric"])

    @staticmethod
    def write_curves(path: Path, records: List[RunRecord]) -> None:
        ExportManager.curve_frame(records).to_csv(path, index=False, encoding="utf-8")

    @staticmethod
    def read_summary(path: Path) -> pd.DataFrame:
        """Successful per-seed rows of a summary.csv"""
        frame = pd.read_csv(path, encoding="utf-8", dtype={"seed": str})
        frame = frame[(frame["seed"] != AGGREGATE_SEED) & (frame["status"] == "ok")].copy()
        frame["seed"] = frame["seed"].astype(int)
        for column in SUMMARY_COLUMNS:
            frame[column] = pd.to_numeric(frame[column], errors="coerce")
        return frame.sort_values("seed").reset_index(drop=True)

    @staticmethod
    def summary_text(label: str, records: List[RunRecord]) -> str:
        """Console block for one run set"""
        output = []
        output.append("=" * 60)
        output.append(f"RUN SUMMARY: {label}")
        output.append("=" * 60)
        for r in sorted(records, key=lambda r: r.seed):
            if r.status != "ok":
                output.append(f"seed {r.seed}: FAILED ({r.error})")
                continue
            eps = "" if r.eps_spent is None else f"  eps={r.eps_spent:.3f}"
            output.append(
                f"seed {r.seed}: {r.metric}={r.final_metric:.4f}  rounds={r.convergence_rounds}"
                f"  overhead={r.overhead:.3f}  uplink x{r.uplink_ratio:.2f}{eps}"
            )
        output.append("-" * 60)
        agg = ExportManager.aggregate_row(records)
        for column in SUMMARY_COLUMNS:
            if agg.get(column) is not None:
                output.append(f"{column:>20}: {agg[column]}")
        output.append("=" * 60)
        return "\n".join(output)

    @staticmethod
    def report_text(means: pd.DataFrame, comparisons: pd.DataFrame) -> str:
        output = []
        output.append("=" * 60)
        output.append("MEAN ± STD")
        output.append("=" * 60)
        for _, row in means.iterrows():
            output.append(
                f"{row['run_set']:<28} {row['measure']:<20} "
                f"{_fmt(row['mean'])} ± {_fmt(row['std'])}  (n={row['n']})"
            )
        output.append("\n" + "=" * 60)
        output.append("PAIRWISE  <p_A, p_Equal, p_B>")
        output.append("=" * 60)
        for _, row in comparisons.iterrows():
            output.append(
                f"{row['pair']:<40} {row['measure']:<20} {row['triple']}  rope=±{row['rope']:g}"
            )
        output.append("=" * 60)
        return "\n".join(output)


def _fmt(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{value:.4g}"
