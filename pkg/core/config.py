"""
Experiment Configuration
YAML text validated into a strict pydantic schema, with preset merging
"""

import hashlib
import json
import math
from typing import Any, Dict, List, Optional, Tuple

import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from models import (
    Activation,
    Algorithm,
    CompressionMethod,
    EvalMetric,
    OptimizerKind,
    PartitionScheme,
    RunMode,
    WorkloadKind,
)

_ISSUE_SEPARATOR = " | "


class ConfigError(ValueError):
    """Configuration rejected; `errors` lists every problem found"""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class WorkloadConfig(_Section):
    kind: WorkloadKind
    n_samples: int = Field(default=1200, ge=12)
    n_features: int = Field(default=8, ge=1)
    n_classes: int = Field(default=3, ge=1)
    noise: float = Field(default=1.0, ge=0.0)
    separation: float = Field(default=3.0, ge=0.0)
    path: Optional[str] = None
    hidden: Optional[List[int]] = None
    activation: Activation = Activation.RELU
    metric: Optional[EvalMetric] = None
    party_a_features: Optional[int] = Field(default=None, ge=1)
    overlap: float = Field(default=1.0, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _check(self):
        issues = []
        if self.kind == WorkloadKind.CSV and not self.path:
            issues.append("workload.path is required for csv workloads")
        if self.hidden is not None and any(w < 1 for w in self.hidden):
            issues.append("workload.hidden widths must be >= 1")
        if self.kind == WorkloadKind.VERTICAL_BLOBS:
            if self.n_features < 2:
                issues.append("vertical workloads need at least 2 features")
            elif self.party_a_features is not None and self.party_a_features >= self.n_features:
                issues.append("workload.party_a_features must leave features for party B")
        _raise_issues(issues)
        return self

    @property
    def is_vertical(self) -> bool:
        return self.kind == WorkloadKind.VERTICAL_BLOBS

    @property
    def is_classification(self) -> bool:
        return self.kind != WorkloadKind.REGRESSION

    def identity(self) -> str:
        """Stable workload name used to match run sets in reports"""
        if self.kind == WorkloadKind.CSV:
            return f"csv:{self.path}"
        return f"{self.kind.value}:{self.n_samples}x{self.n_features}:c{self.n_classes}"


class PartitionConfig(_Section):
    scheme: PartitionScheme = PartitionScheme.IID
    n_clients: int = Field(default=5, ge=1)
    alpha: float = Field(default=1.0, gt=0.0)


class AlgorithmConfig(_Section):
    name: Algorithm = Algorithm.FEDSGD
    fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    local_epochs: int = Field(default=1, ge=1)
    mu: float = Field(default=0.0, ge=0.0)
    max_rounds: int = Field(default=300, ge=1)
    batch_size: int = Field(default=0, ge=0)  # 0 means full batch
    lr: float = Field(default=0.1, gt=0.0)
    optimizer: OptimizerKind = OptimizerKind.SGD
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    patience: int = Field(default=10, ge=1)
    factor: float = Field(default=0.1, gt=0.0, lt=1.0)
    max_reductions: int = Field(default=4, ge=1)

    @model_validator(mode="after")
    def _check(self):
        issues = []
        if self.name == Algorithm.FEDSGD:
            if self.fraction != 1.0:
                issues.append("fedsgd requires algorithm.fraction = 1")
            if self.local_epochs != 1:
                issues.append("fedsgd requires algorithm.local_epochs = 1")
        if self.mu > 0 and self.name != Algorithm.FEDPROX:
            issues.append("algorithm.mu is only used by fedprox")
        _raise_issues(issues)
        return self


class PrivacyConfig(_Section):
    epsilon: Optional[float] = Field(default=None, gt=0.0)
    noise_multiplier: Optional[float] = Field(default=None, ge=0.0)
    delta: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    clip: float = Field(default=0.1, gt=0.0)
    max_rounds: int = Field(default=300, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if (self.epsilon is None) == (self.noise_multiplier is None):
            _raise_issues(["privacy needs exactly one of epsilon or noise_multiplier"])
        return self


class SecureAggConfig(_Section):
    parts_sent: int = Field(default=1, ge=1)
    scale_bits: int = Field(default=20, ge=1, le=40)
    modulus: int = Field(default=(1 << 61) - 1, gt=2, lt=1 << 62)
    max_abs: float = Field(default=1e3, gt=0.0)

    @property
    def k(self) -> int:
        return self.parts_sent + 1


class CompressionConfig(_Section):
    method: CompressionMethod = CompressionMethod.TOPK
    ratio: float = Field(default=0.01, gt=0.0, le=1.0)
    rank: int = Field(default=1, ge=1)
    error_feedback: bool = True
    damping: float = Field(default=0.5, ge=0.0, le=1.0)
    rescale: bool = False


class ChannelConfig(_Section):
    bandwidth_mbps: Optional[float] = Field(default=None, gt=0.0)  # None is unlimited
    latency_ms: float = Field(default=0.0, ge=0.0)


class CostConfig(_Section):
    wall_clock: bool = False
    train_per_sample_param: float = Field(default=3e-8, ge=0.0)
    eval_per_sample_param: float = Field(default=1e-8, ge=0.0)
    encrypt_per_unit: float = Field(default=5e-8, ge=0.0)


class ExperimentConfig(_Section):
    name: str = "experiment"
    preset: Optional[str] = None
    strict: bool = True
    workload: WorkloadConfig
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    mode: RunMode = RunMode.FEDERATED
    solo_client: int = Field(default=0, ge=0)
    algorithm: AlgorithmConfig = Field(default_factory=AlgorithmConfig)
    privacy: Optional[PrivacyConfig] = None
    secure_agg: Optional[SecureAggConfig] = None
    compression: Optional[CompressionConfig] = None
    channel: ChannelConfig = Field(default_factory=ChannelConfig)
    cost: CostConfig = Field(default_factory=CostConfig)
    rho: float = Field(default=0.0, ge=0.0, lt=1.0)
    repetitions: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)
    output_dir: str = "results"

    @model_validator(mode="after")
    def _check(self):
        issues = []
        vertical_mode = self.mode in (RunMode.SPLITNN, RunMode.VERTICAL_COMBINED)
        if vertical_mode and not self.workload.is_vertical:
            issues.append(f"mode {self.mode.value} needs a vertical workload")
        if self.workload.is_vertical and not vertical_mode:
            issues.append("vertical workloads run in splitnn or vertical-combined mode")
        if vertical_mode:
            for name in ("privacy", "secure_agg", "compression"):
                if getattr(self, name) is not None:
                    issues.append(f"{name} is not available in {self.mode.value} mode")
        if self.mode != RunMode.FEDERATED and self.algorithm.fraction != 1.0:
            issues.append(f"mode {self.mode.value} requires algorithm.fraction = 1")
        if self.mode == RunMode.FEDERATED and self.partition.n_clients < 2:
            issues.append("federated mode needs at least 2 clients")
        if self.mode == RunMode.SOLO and self.solo_client >= self.partition.n_clients:
            issues.append(
                f"solo_client {self.solo_client} outside the {self.partition.n_clients} clients"
            )
        if (
            self.partition.scheme == PartitionScheme.LABEL_SKEW
            and not self.workload.is_classification
        ):
            issues.append("label-skew partitioning needs a classification workload")
        if self.secure_agg is not None:
            if self.mode != RunMode.FEDERATED:
                issues.append("secure_agg needs federated mode")
            elif self.secure_agg.k > self.participants:
                issues.append(
                    f"secure_agg sends {self.secure_agg.parts_sent} parts (K={self.secure_agg.k}) "
                    f"but only {self.participants} clients take part per round"
                )
        _raise_issues(issues)
        return self

    @property
    def participants(self) -> int:
        """Clients sampled per round"""
        if self.mode != RunMode.FEDERATED:
            return 1
        n = self.partition.n_clients
        return min(n, math.ceil(self.algorithm.fraction * n - 1e-9))

    @property
    def round_cap(self) -> int:
        cap = self.algorithm.max_rounds
        if self.privacy is not None:
            cap = min(cap, self.privacy.max_rounds)
        return cap

    def config_hash(self) -> str:
        payload = self.model_dump(mode="json", exclude={"output_dir", "repetitions", "seed"})
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    @property
    def label(self) -> str:
        return self.preset or self.name


def _raise_issues(issues: List[str]) -> None:
    if issues:
        raise ValueError(_ISSUE_SEPARATOR.join(issues))


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively overlay override onto a copy of base"""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _drop_unknown(raw: Dict[str, Any], model: type, prefix: str = "") -> Dict[str, Any]:
    """Remove keys the schema does not know, warning about each"""
    kept = {}
    for key, value in raw.items():
        field = model.model_fields.get(key)
        if field is None:
            logger.warning(f"ignoring unknown config key {prefix}{key}")
            continue
        sub = _section_type(field.annotation)
        if sub is not None and isinstance(value, dict):
            value = _drop_unknown(value, sub, f"{prefix}{key}.")
        kept[key] = value
    return kept


def _section_type(annotation) -> Optional[type]:
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return annotation
    for arg in getattr(annotation, "__args__", ()) or ():
        if isinstance(arg, type) and issubclass(arg, BaseModel):
            return arg
    return None


def _format_errors(exc: ValidationError) -> List[str]:
    messages = []
    for err in exc.errors():
        loc = ".".join(str(part) for part in err["loc"])
        msg = err["msg"]
        if msg.startswith("Value error, "):
            msg = msg[len("Value error, "):]
        for part in msg.split(_ISSUE_SEPARATOR):
            messages.append(f"{loc}: {part}" if loc else part)
    return messages


def build_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """Validate a mapping, merging in its preset first"""
    from core.presets import get_preset, preset_names

    if not isinstance(raw, dict):
        raise ConfigError([f"config must be a mapping, got {type(raw).__name__}"])
    raw = dict(raw)
    preset = raw.get("preset")
    if preset is not None:
        if preset not in preset_names():
            raise ConfigError([f"preset: unknown preset {preset!r}"])
        raw = deep_merge(get_preset(preset), raw)
    if raw.get("strict", True) is False:
        raw = _drop_unknown(raw, ExperimentConfig)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def override_config(config: ExperimentConfig, updates: Dict[str, Any]) -> ExperimentConfig:
    """Copy of a validated config with top-level fields replaced and checked again"""
    try:
        return ExperimentConfig.model_validate({**config.model_dump(), **updates})
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def parse_config(text: str) -> ExperimentConfig:
    """YAML text to a validated ExperimentConfig; all problems are reported together"""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"malformed YAML: {exc}"]) from None
    if raw is None:
        raw = {}
    return build_config(raw)


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def load_workload_config(path: str) -> Tuple[WorkloadConfig, int]:
    """A bare workload mapping, or a full config whose workload section is used"""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh.read()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"malformed YAML: {exc}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"workload must be a mapping, got {type(raw).__name__}"])
    seed = int(raw.get("seed", 0))
    if seed < 0:
        raise ConfigError([f"seed: must be >= 0, got {seed}"])
    section = raw.get("workload", {k: v for k, v in raw.items() if k != "seed"})
    try:
        return WorkloadConfig.model_validate(section), seed
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
