"""
fedbench Data Models
Shared enums and runtime records for the federated learning benchmark
"""

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional
from enum import Enum

if TYPE_CHECKING:
    from core.mlp import ParamVector
    from core.netsim import TimeLedger


class Algorithm(Enum):
    """Horizontal aggregation algorithms"""
    FEDSGD = "fedsgd"
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    FEDNOVA = "fednova"


class RunMode(Enum):
    """How the training data is used by a run"""
    FEDERATED = "federated"
    COMBINED = "combined"  # all shards pooled into one client
    SOLO = "solo"  # one client alone
    SPLITNN = "splitnn"
    VERTICAL_COMBINED = "vertical-combined"


class PartitionScheme(Enum):
    """Horizontal partitioning schemes"""
    IID = "iid"
    LABEL_SKEW = "label-skew-dirichlet"
    QUANTITY_SKEW = "quantity-skew-dirichlet"
    POWER_LAW = "power-law"


class WorkloadKind(Enum):
    """Dataset sources"""
    BLOBS = "blobs-classification"
    REGRESSION = "linear-regression"
    VERTICAL_BLOBS = "vertical-blobs"
    CSV = "csv"


class Activation(Enum):
    RELU = "relu"
    TANH = "tanh"


class OutputHead(Enum):
    """Output layer + loss pairing"""
    SOFTMAX_CE = "softmax-ce"
    SIGMOID_BCE = "sigmoid-bce"
    LINEAR_MSE = "linear-mse"
    CUT = "cut"  # SplitNN bottom: hidden activation, no loss


class EvalMetric(Enum):
    TOP1 = "top1"
    BINARY = "binary"
    MAE = "mae"
    MSE = "mse"

    @property
    def higher_is_better(self) -> bool:
        return self in (EvalMetric.TOP1, EvalMetric.BINARY)


class OptimizerKind(Enum):
    SGD = "sgd-momentum"
    ADAM = "adam"


class CompressionMethod(Enum):
    """Uplink gradient compressors"""
    TOPK = "topk"
    RANDK = "randk"
    LOWRANK = "lowrank"


class TimeBucket(Enum):
    """Simulated time decomposition buckets"""
    TRAIN = "train"
    COMMUNICATE = "communicate"
    ENCRYPT = "encrypt"
    IDLE = "idle"
    OTHER = "other"


@dataclass
class ClientUpdate:
    """One client's round output"""
    client_id: int
    payload: "ParamVector"  # gradient for fedsgd, parameter delta otherwise
    local_steps: int
    n_samples: int
    wire_bytes: int = 0
    samples_processed: int = 0

    def __post_init__(self):
        if self.local_steps < 1:
            raise ValueError(f"local_steps must be >= 1, got {self.local_steps}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")


@dataclass
class RoundResult:
    """Server-side record of one communication round"""
    round_index: int
    participants: List[int]
    params: "ParamVector"
    metric: float
    lr: float
    reduction_count: int
    bytes_up: int = 0
    bytes_down: int = 0
    bytes_peer: int = 0
    bucket_seconds: Dict[str, Dict[str, float]] = field(default_factory=dict)
    eps_spent: Optional[float] = None

    def to_record(self) -> dict:
        """JSONL round record"""
        return {
            "format": "fedbench.round/v1",
            "round": self.round_index,
            "participants": list(self.participants),
            "metric": self.metric,
            "lr": self.lr,
            "reduction_count": self.reduction_count,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "bytes_peer": self.bytes_peer,
            "eps_spent": self.eps_spent,
            "buckets": self.bucket_seconds,
        }


@dataclass
class RunRecord:
    """Summary of one seeded run"""
    preset: str
    workload: str
    config_hash: str
    seed: int
    final_metric: float
    convergence_rounds: int
    converged: bool
    throughput: float
    overhead: float
    uplink_ratio: float
    eps_spent: Optional[float] = None
    metric: str = ""
    curve: List[float] = field(default_factory=list)
    status: str = "ok"  # "ok", "error"
    error: str = ""

    def to_row(self) -> dict:
        """CSV summary row"""
        return {
            "preset": self.preset,
            "seed": self.seed,
            "final_metric": self.final_metric,
            "convergence_rounds": self.convergence_rounds,
            "throughput": self.throughput,
            "overhead": self.overhead,
            "uplink_ratio": self.uplink_ratio,
            "eps_spent": self.eps_spent,
            "metric": self.metric,
            "converged": self.converged,
            "workload": self.workload,
            "config_hash": self.config_hash,
            "status": self.status,
            "error": self.error,
            "format": "fedbench.summary/v1",
        }


@dataclass
class ComparisonResult:
    """Bayesian correlated t-test outcome for A − B"""
    p_left: float  # B better
    p_rope: float
    p_right: float  # A better
    rope: float
    n_runs: int

    def __post_init__(self):
        total = self.p_left + self.p_rope + self.p_right
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1, got {total}")

    def as_triple(self) -> str:
        """Render as ⟨p_A, p_Equal, p_B⟩"""
        return f"<{self.p_right:.3g}, {self.p_rope:.3g}, {self.p_left:.3g}>"


@dataclass
class ExperimentResult:
    """Everything one seeded run produced"""
    rounds: List[RoundResult]
    params: "ParamVector"
    final_metric: float
    convergence_rounds: int
    converged: bool
    throughput: float
    overhead: float
    uplink_ratio: float = 1.0
    downlink_ratio: float = 1.0
    eps_spent: Optional[float] = None
    samples_processed: int = 0
    ledger: Optional["TimeLedger"] = None
    privacy_rows: List[dict] = field(default_factory=list)

    @property
    def reduction_curve(self) -> List[int]:
        return [r.reduction_count for r in self.rounds]

    @property
    def metric_curve(self) -> List[float]:
        return [r.metric for r in self.rounds]
