"""
Experiment Runner
Builds tasks from a validated config, runs seeded repetitions, writes their
artifacts and compares run sets.
"""

import itertools
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger
from tqdm import tqdm

from models import EvalMetric, OutputHead, RunMode, RunRecord, WorkloadKind
from core.config import ExperimentConfig, WorkloadConfig
from core.data import (
    Dataset,
    align_vertical,
    load_csv,
    partition,
    split_train_test_val,
    split_vertical,
    synth_dataset,
)
from core.fl_engine import FederatedTask, run_experiment
from core.mlp import MlpSpec, default_hidden
from core.netsim import ledger_rows
from core.splitnn import SplitSpec, VerticalTask
from core.stats import DEFAULT_ROPES, bayes_corr_ttest, default_metric, mean_std, paired_diffs
from utils.export import ExportManager

LOWER_IS_BETTER = {"convergence_rounds", "overhead"}


class ReportError(ValueError):
    """Run sets cannot be compared"""


def load_workload(workload: WorkloadConfig, seed: int) -> Dataset:
    """Materialize the configured dataset; synthetic data depends only on the base seed"""
    if workload.kind == WorkloadKind.CSV:
        regression = workload.metric in (EvalMetric.MAE, EvalMetric.MSE)
        return load_csv(workload.path, classification=not regression)
    kind = WorkloadKind.BLOBS if workload.is_vertical else workload.kind
    return synth_dataset(
        kind.value,
        workload.n_samples,
        workload.n_features,
        classes=workload.n_classes,
        noise=workload.noise,
        seed=seed,
        separation=workload.separation,
    )


def _head_for(ds: Dataset, metric: Optional[EvalMetric]):
    """(output head, output width) for a dataset"""
    if not ds.is_classification:
        return OutputHead.LINEAR_MSE, 1
    if metric == EvalMetric.BINARY and ds.n_classes <= 2:
        return OutputHead.SIGMOID_BCE, 1
    return OutputHead.SOFTMAX_CE, max(2, ds.n_classes)


def build_task(config: ExperimentConfig, seed: int) -> Union[FederatedTask, VerticalTask]:
    """Split, partition and wrap the workload for one repetition"""
    workload = config.workload
    ds = load_workload(workload, config.seed)
    if workload.is_vertical:
        return _vertical_task(config, ds, seed)

    train, test, val = split_train_test_val(ds, seed)
    head, n_out = _head_for(ds, workload.metric)
    hidden = workload.hidden or default_hidden(ds.n_features)
    spec = MlpSpec((ds.n_features, *hidden, n_out), workload.activation, head)
    metric = workload.metric or default_metric(head)

    part = config.partition
    if config.mode == RunMode.COMBINED:
        return FederatedTask(spec, [train], val, test, metric)

    shards = partition(train, part.scheme, part.n_clients, part.alpha, seed).shards(train)
    if config.mode == RunMode.SOLO:
        cid = config.solo_client
        return FederatedTask(spec, [shards[cid]], val, test, metric, client_ids=[cid])
    return FederatedTask(spec, shards, val, test, metric)


def _vertical_task(config: ExperimentConfig, ds: Dataset, seed: int) -> VerticalTask:
    workload = config.workload
    width_a = workload.party_a_features or ds.n_features // 2
    party_a, party_b = split_vertical(ds, width_a, workload.overlap, config.seed)
    aligned = align_vertical(party_a, party_b, label_owner=0)
    joined = aligned.to_dataset(name=f"{ds.name}/aligned")
    train, test, val = split_train_test_val(joined, seed)

    head, n_out = _head_for(joined, workload.metric)
    if config.mode == RunMode.SPLITNN:
        slices = aligned.party_slices()
    else:
        slices = [slice(0, joined.n_features)]
    widths = [s.stop - s.start for s in slices]
    split = SplitSpec.default(widths, n_out, head, workload.activation)
    metric = workload.metric or default_metric(head)
    logger.debug(
        f"vertical task: {len(joined)} aligned rows, party widths {widths}, "
        f"{int((~aligned.present[:, 1]).sum())} rows zero-padded for party B"
    )
    return VerticalTask(split, slices, train, val, test, metric)


def run_once(config: ExperimentConfig, seed: int, out_dir: Optional[Path] = None) -> RunRecord:
    """One repetition; artifacts go to out_dir when given"""
    task = build_task(config, seed)
    result = run_experiment(config, task, seed)
    if out_dir is not None:
        ExportManager.write_round_log(out_dir / f"round-{seed}.jsonl", result.rounds)
        if result.ledger is not None:
            ExportManager.write_rows(out_dir / f"ledger-{seed}.csv", ledger_rows(result.ledger))
        if result.privacy_rows:
            ExportManager.write_rows(out_dir / f"privacy-{seed}.csv", result.privacy_rows)
    return RunRecord(
        preset=config.label,
        workload=config.workload.identity(),
        config_hash=config.config_hash(),
        seed=seed,
        final_metric=result.final_metric,
        convergence_rounds=result.convergence_rounds,
        converged=result.converged,
        throughput=result.throughput,
        overhead=result.overhead,
        uplink_ratio=result.uplink_ratio,
        eps_spent=result.eps_spent,
        metric=task.metric.value,
        curve=result.metric_curve,
    )


def _run_safe(config: ExperimentConfig, seed: int, out_dir: Optional[Path]) -> RunRecord:
    """run_once that turns a failure into an error record"""
    try:
        return run_once(config, seed, out_dir)
    except Exception as exc:
        logger.error(f"{config.label} seed {seed} failed: {type(exc).__name__}: {exc}")
        return RunRecord(
            preset=config.label,
            workload=config.workload.identity(),
            config_hash=config.config_hash(),
            seed=seed,
            final_metric=float("nan"),
            convergence_rounds=config.round_cap,
            converged=False,
            throughput=float("nan"),
            overhead=float("nan"),
            uplink_ratio=float("nan"),
            status="error",
            error=f"{type(exc).__name__}: {exc}",
        )


def run(
    config: ExperimentConfig,
    output_dir: Optional[str] = None,
    workers: int = 1,
    progress: bool = True,
) -> List[RunRecord]:
    """All repetitions with seeds base+i, then summary.csv"""
    out_dir = Path(output_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = [config.seed + i for i in range(config.repetitions)]
    logger.info(
        f"running {config.label} ({config.config_hash()}): {len(seeds)} repetitions -> {out_dir}"
    )

    records: List[RunRecord] = []
    bar = tqdm(total=len(seeds), desc=config.label, disable=not progress, leave=False)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_safe, config, s, out_dir): s for s in seeds}
            for future in as_completed(futures):
                records.append(future.result())
                bar.update(1)
    else:
        for s in seeds:
            records.append(_run_safe(config, s, out_dir))
            bar.update(1)
    bar.close()

    records.sort(key=lambda r: r.seed)
    ExportManager.write_summary(out_dir / "summary.csv", records)
    ExportManager.write_curves(out_dir / "curves.csv", records)
    failed = sum(r.status != "ok" for r in records)
    if failed:
        logger.warning(f"{failed}/{len(records)} repetitions failed")
    return records


def _set_label(frame: pd.DataFrame, directory: Path, taken: Dict[str, int]) -> str:
    label = str(frame["preset"].iloc[0]) if len(frame) else directory.name
    if label in taken:
        taken[label] += 1
        label = f"{label}@{directory.name}"
    else:
        taken[label] = 0
    return label


def report(
    dirs: Sequence[Union[str, Path]],
    rope: Optional[float] = None,
    rho: float = 0.0,
    out_path: Optional[Union[str, Path]] = None,
):
    """
    Mean ± std per run set and pairwise correlated t-tests for every measure.
    p_A is always the probability that A is better, so lower-is-better
    measures are compared on B - A.
    """
    if len(dirs) < 2:
        raise ReportError(f"need at least 2 run directories, got {len(dirs)}")

    sets: Dict[str, pd.DataFrame] = {}
    taken: Dict[str, int] = {}
    for d in dirs:
        directory = Path(d)
        frame = ExportManager.read_summary(directory / "summary.csv")
        if frame.empty:
            raise ReportError(f"{directory}: no successful runs")
        sets[_set_label(frame, directory, taken)] = frame

    workloads = {label: set(frame["workload"]) for label, frame in sets.items()}
    distinct = set().union(*workloads.values())
    if len(distinct) != 1:
        raise ReportError(f"run sets use different workloads: {sorted(distinct)}")
    workload = distinct.pop()

    ropes = dict(DEFAULT_ROPES)
    if rope is not None:
        ropes["final_metric"] = rope
    metric_names = set().union(*(set(f["metric"].dropna()) for f in sets.values()))
    error_metric = bool(metric_names & {EvalMetric.MAE.value, EvalMetric.MSE.value})
    lower_better = LOWER_IS_BETTER | ({"final_metric"} if error_metric else set())

    mean_rows = []
    for label, frame in sets.items():
        for measure in ropes:
            values = frame[measure].dropna().tolist()
            mean, std = mean_std(values) if values else (np.nan, np.nan)
            mean_rows.append(
                {"run_set": label, "measure": measure, "mean": mean, "std": std, "n": len(values)}
            )

    comparison_rows = []
    for (label_a, a), (label_b, b) in itertools.combinations(sets.items(), 2):
        seeds = sorted(set(a["seed"]) & set(b["seed"]))
        if len(seeds) < 2:
            raise ReportError(f"{label_a} and {label_b} share fewer than 2 seeds")
        a_by_seed, b_by_seed = a.set_index("seed"), b.set_index("seed")
        for measure, width in ropes.items():
            va = a_by_seed.loc[seeds, measure].to_numpy(dtype=np.float64)
            vb = b_by_seed.loc[seeds, measure].to_numpy(dtype=np.float64)
            diffs = paired_diffs(vb, va) if measure in lower_better else paired_diffs(va, vb)
            result = bayes_corr_ttest(diffs, width, rho)
            comparison_rows.append({
                "workload": workload,
                "pair": f"{label_a} vs {label_b}",
                "measure": measure,
                "triple": result.as_triple(),
                "p_a": result.p_right,
                "p_equal": result.p_rope,
                "p_b": result.p_left,
                "rope": width,
                "n": result.n_runs,
            })

    means = pd.DataFrame(mean_rows)
    comparisons = pd.DataFrame(comparison_rows)
    if out_path is not None:
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        comparisons.to_csv(out, index=False, encoding="utf-8")
        means.to_csv(out.with_name(out.stem + "-means.csv"), index=False, encoding="utf-8")
        logger.info(f"report written to {out}")
    return means, comparisons
