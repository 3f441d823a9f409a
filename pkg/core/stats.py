"""
Metrics and Statistics
Evaluation metrics, convergence detection, run aggregation and the
Bayesian correlated t-test with a region of practical equivalence.
"""

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as sps

from models import ComparisonResult, EvalMetric, OutputHead
from core.mlp import MlpSpec, ParamVector, predict

DEFAULT_ROPES = {
    "final_metric": 0.01,
    "convergence_rounds": 10.0,
    "throughput": 100.0,
    "overhead": 0.10,
}
CONVERGED_AT = 4


class StatsError(ValueError):
    """Invalid input to a metric or a statistical comparison"""


_COMPATIBLE = {
    EvalMetric.TOP1: (OutputHead.SOFTMAX_CE, OutputHead.SIGMOID_BCE),
    EvalMetric.BINARY: (OutputHead.SIGMOID_BCE, OutputHead.SOFTMAX_CE),
    EvalMetric.MAE: (OutputHead.LINEAR_MSE,),
    EvalMetric.MSE: (OutputHead.LINEAR_MSE,),
}


def default_metric(head: OutputHead) -> EvalMetric:
    if head == OutputHead.SOFTMAX_CE:
        return EvalMetric.TOP1
    if head == OutputHead.SIGMOID_BCE:
        return EvalMetric.BINARY
    if head == OutputHead.LINEAR_MSE:
        return EvalMetric.MSE
    raise StatsError(f"no metric for head {head.value}")


def metric_value(outputs: np.ndarray, targets, metric: EvalMetric) -> float:
    """Score raw model outputs against targets"""
    y = np.asarray(outputs, dtype=np.float64)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    t = np.asarray(targets)
    if t.shape[0] != y.shape[0]:
        raise StatsError(f"{y.shape[0]} predictions for {t.shape[0]} targets")
    if y.shape[0] == 0:
        raise StatsError("cannot score an empty set")

    if metric in (EvalMetric.TOP1, EvalMetric.BINARY):
        if y.shape[1] == 1:
            predicted = (y[:, 0] > 0.5).astype(np.int64)
        else:
            predicted = np.argmax(y, axis=1)
        return float(np.mean(predicted == t.reshape(-1).astype(np.int64)))

    residual = y - t.astype(np.float64).reshape(y.shape)
    if metric == EvalMetric.MAE:
        return float(np.mean(np.abs(residual)))
    return float(np.mean(residual**2))


def check_metric(spec: MlpSpec, metric: EvalMetric) -> None:
    if spec.head not in _COMPATIBLE[metric]:
        raise StatsError(f"metric {metric.value} does not fit output head {spec.head.value}")
    two_way = spec.output_width == 2
    if metric == EvalMetric.BINARY and spec.head == OutputHead.SOFTMAX_CE and not two_way:
        raise StatsError("binary accuracy on a softmax head needs exactly two outputs")


def evaluate(spec: MlpSpec, params: ParamVector, dataset, metric: EvalMetric) -> float:
    """Metric of the model on a Dataset"""
    check_metric(spec, metric)
    return metric_value(predict(spec, params, dataset.features), dataset.labels, metric)


def convergence_rounds(curve: Sequence[int], target: int = CONVERGED_AT) -> Optional[int]:
    """First 1-based round whose reduction count reaches target, None if never"""
    counts = np.asarray(curve, dtype=np.int64)
    if counts.size and np.any(np.diff(counts) < 0):
        raise StatsError("reduction counts must be nondecreasing")
    hits = np.flatnonzero(counts >= target)
    return int(hits[0]) + 1 if hits.size else None


def reported_rounds(curve: Sequence[int], cap: int, target: int = CONVERGED_AT) -> int:
    """Convergence round, or the round cap for runs that never converged"""
    rounds = convergence_rounds(curve, target)
    return cap if rounds is None else rounds


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation"""
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        raise StatsError("no values to aggregate")
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), std


def bayes_corr_ttest(diffs: Sequence[float], rope: float, rho: float = 0.0) -> ComparisonResult:
    """
    Posterior of the mean difference A - B under the correlated t-test.

    The posterior is Student-t with n-1 degrees of freedom, centred on the sample
    mean with scale sqrt((1/n + rho/(1-rho)) s^2). Zero variance collapses it to a
    point mass at the mean.
    """
    d = np.asarray(diffs, dtype=np.float64)
    n = d.size
    if n < 2:
        raise StatsError(f"need at least 2 paired differences, got {n}")
    if not np.all(np.isfinite(d)):
        raise StatsError("differences must be finite")
    if rope < 0:
        raise StatsError(f"rope must be >= 0, got {rope}")
    if not 0 <= rho < 1:
        raise StatsError(f"rho must be in [0, 1), got {rho}")

    mean = float(np.mean(d))
    var = float(np.var(d, ddof=1))
    if var == 0.0 or var <= 1e-24 * max(1.0, mean * mean):
        if abs(mean) <= rope:
            return ComparisonResult(0.0, 1.0, 0.0, rope, n)
        if mean > 0:
            return ComparisonResult(0.0, 0.0, 1.0, rope, n)
        return ComparisonResult(1.0, 0.0, 0.0, rope, n)

    scale = math.sqrt((1.0 / n + rho / (1.0 - rho)) * var)
    dist = sps.t(df=n - 1)
    # Both tails from the lower cdf so swapping A and B swaps them exactly
    p_left = float(dist.cdf((-rope - mean) / scale))
    p_right = float(dist.cdf((-rope + mean) / scale))
    p_rope = max(0.0, 1.0 - (p_left + p_right))
    return ComparisonResult(p_left, p_rope, p_right, rope, n)


def paired_diffs(a: Sequence[float], b: Sequence[float]) -> List[float]:
    """Per-seed A - B, pairing runs in seed order"""
    if len(a) != len(b):
        raise StatsError(f"run sets differ in size: {len(a)} vs {len(b)}")
    return [float(x) - float(y) for x, y in zip(a, b)]
