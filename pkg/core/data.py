"""
Datasets and Partitioners
Splitting, horizontal partitioning, vertical alignment and synthetic workloads
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from models import PartitionScheme
from core.numkit import SeededRng, largest_remainder, sample_dirichlet

MAX_PARTITION_ATTEMPTS = 100


class PartitionError(ValueError):
    """A partition could not be produced"""


class AlignmentError(ValueError):
    """Vertical datasets cannot be joined"""


@dataclass
class Dataset:
    """Feature matrix, labels and optional join keys"""
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    keys: Optional[List[str]] = None
    n_classes: int = 0  # 0 for regression targets
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        self.labels = np.asarray(self.labels)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("features rows != labels length")
        if self.keys is not None and len(self.keys) != self.features.shape[0]:
            raise ValueError("features rows != keys length")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.n_classes > 0

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            name=name or self.name,
            keys=[self.keys[i] for i in idx] if self.keys is not None else None,
            n_classes=self.n_classes,
            meta=dict(self.meta),
        )

    def class_histogram(self) -> np.ndarray:
        if not self.is_classification:
            raise ValueError(f"{self.name} has no class labels")
        return np.bincount(self.labels.astype(np.int64), minlength=self.n_classes)


@dataclass
class PartitionSpec:
    """How a training set is divided across clients"""
    scheme: PartitionScheme
    alpha: float
    n_clients: int
    seed: int
    client_indices: List[np.ndarray]
    attempts: int = 1

    @property
    def sizes(self) -> List[int]:
        return [len(idx) for idx in self.client_indices]

    def validate(self, n: int) -> None:
        """Raise unless the index lists form a set partition of range(n)"""
        merged = np.concatenate(self.client_indices) if self.client_indices else np.array([])
        if merged.size != n or not np.array_equal(np.sort(merged), np.arange(n)):
            raise PartitionError("client index lists are not a partition of the training set")

    def shards(self, train: Dataset) -> List[Dataset]:
        return [
            train.subset(idx, name=f"{train.name}/client-{i}")
            for i, idx in enumerate(self.client_indices)
        ]


def split_train_test_val(ds: Dataset, seed: int) -> Tuple[Dataset, Dataset, Dataset]:
    """Shuffled 83.33% / 8.33% / remainder split"""
    n = len(ds)
    if n < 12:
        raise ValueError(f"need at least 12 records to split, got {n}")
    # Integer arithmetic keeps the floor exact
    n_train = n * 8333 // 10000
    n_test = n * 833 // 10000
    perm = SeededRng(seed).derive(1).permutation(n)
    train = ds.subset(np.sort(perm[:n_train]), name=f"{ds.name}/train")
    test = ds.subset(np.sort(perm[n_train:n_train + n_test]), name=f"{ds.name}/test")
    val = ds.subset(np.sort(perm[n_train + n_test:]), name=f"{ds.name}/val")
    return train, test, val


def partition_iid(train: Dataset, n_clients: int, seed: int) -> PartitionSpec:
    """Shuffled round-robin assignment"""
    n = len(train)
    if n_clients < 2:
        raise PartitionError(f"need at least 2 clients, got {n_clients}")
    if n_clients > n:
        raise PartitionError(f"{n_clients} clients for only {n} records")
    perm = SeededRng(seed).derive(2).permutation(n)
    indices = [np.sort(perm[i::n_clients]) for i in range(n_clients)]
    return PartitionSpec(PartitionScheme.IID, float("inf"), n_clients, seed, indices)


def _check_alpha(alpha: float, n_clients: int, n: int) -> None:
    if alpha <= 0:
        raise PartitionError(f"alpha must be > 0, got {alpha}")
    if n_clients < 2:
        raise PartitionError(f"need at least 2 clients, got {n_clients}")
    if n_clients > n:
        raise PartitionError(f"{n_clients} clients for only {n} records")


def partition_label_skew(train: Dataset, alpha: float, n_clients: int, seed: int) -> PartitionSpec:
    """Per class k, p_k ~ Dir_N(alpha) decides how class k is spread over clients"""
    if not train.is_classification:
        raise PartitionError("label skew needs class labels")
    _check_alpha(alpha, n_clients, len(train))

    labels = train.labels.astype(np.int64)
    base = SeededRng(seed).derive(3)
    for attempt in range(MAX_PARTITION_ATTEMPTS):
        rng = base.derive(attempt)
        buckets: List[List[np.ndarray]] = [[] for _ in range(n_clients)]
        for k in np.unique(labels):
            idx_k = np.flatnonzero(labels == k)
            idx_k = idx_k[rng.permutation(idx_k.size)]
            p_k = sample_dirichlet(alpha, n_clients, rng)
            counts = largest_remainder(p_k, idx_k.size)
            for client, chunk in enumerate(np.split(idx_k, np.cumsum(counts)[:-1])):
                buckets[client].append(chunk)
        indices = [np.sort(np.concatenate(b)) for b in buckets]
        if all(idx.size > 0 for idx in indices):
            if attempt:
                logger.debug(f"label skew alpha={alpha}: {attempt} empty-client resamples")
            return PartitionSpec(
                PartitionScheme.LABEL_SKEW, alpha, n_clients, seed, indices, attempt + 1
            )
    raise PartitionError(
        f"no partition without empty clients after {MAX_PARTITION_ATTEMPTS} draws (alpha={alpha})"
    )


def power_law_weights(alpha: float, n_clients: int, rng: SeededRng) -> np.ndarray:
    """Normalized (i+1)^-alpha weights in a seeded random client order"""
    w = np.arange(1, n_clients + 1, dtype=np.float64) ** (-alpha)
    w = w / w.sum()
    return w[rng.permutation(n_clients)]


def _stratified_order(labels: np.ndarray, rng: SeededRng) -> np.ndarray:
    """Interleave classes so any contiguous run keeps the global class mix"""
    positions = np.empty(labels.size)
    for k in np.unique(labels):
        idx_k = np.flatnonzero(labels == k)
        idx_k = idx_k[rng.permutation(idx_k.size)]
        positions[idx_k] = (np.arange(idx_k.size) + 0.5) / idx_k.size
    return np.lexsort((labels, positions))


def partition_quantity_skew(
    train: Dataset,
    alpha: float,
    n_clients: int,
    seed: int,
    mode: PartitionScheme = PartitionScheme.QUANTITY_SKEW,
    weights: Optional[Sequence[float]] = None,
) -> PartitionSpec:
    """Client sizes from Dir_N(alpha) or power-law weights, each client stratified by class"""
    n = len(train)
    _check_alpha(alpha, n_clients, n)
    if mode not in (PartitionScheme.QUANTITY_SKEW, PartitionScheme.POWER_LAW):
        raise PartitionError(f"unsupported quantity mode {mode}")
    if weights is not None and len(weights) != n_clients:
        raise PartitionError("weights length != n_clients")

    labels = train.labels.astype(np.int64) if train.is_classification else np.zeros(n, np.int64)
    base = SeededRng(seed).derive(4)
    for attempt in range(MAX_PARTITION_ATTEMPTS):
        rng = base.derive(attempt)
        if weights is not None:
            p = np.asarray(weights, dtype=np.float64)
        elif mode == PartitionScheme.POWER_LAW:
            p = power_law_weights(alpha, n_clients, rng)
        else:
            p = sample_dirichlet(alpha, n_clients, rng)
        sizes = largest_remainder(p, n)
        if np.all(sizes > 0):
            order = _stratified_order(labels, rng)
            chunks = np.split(order, np.cumsum(sizes)[:-1])
            indices = [np.sort(c) for c in chunks]
            return PartitionSpec(mode, alpha, n_clients, seed, indices, attempt + 1)
        if weights is not None:
            break
    raise PartitionError(f"quantity skew left a client empty (alpha={alpha}, mode={mode.value})")


def partition(
    train: Dataset, scheme: PartitionScheme, n_clients: int, alpha: float, seed: int
) -> PartitionSpec:
    """Dispatch on the configured scheme"""
    if scheme == PartitionScheme.IID:
        spec = partition_iid(train, n_clients, seed)
    elif scheme == PartitionScheme.LABEL_SKEW:
        spec = partition_label_skew(train, alpha, n_clients, seed)
    else:
        spec = partition_quantity_skew(train, alpha, n_clients, seed, mode=scheme)
    spec.validate(len(train))
    skew = ""
    if train.is_classification:
        skew = f", mean max class share={label_skew_stats(spec, train.labels):.3f}"
    logger.debug(f"partition {scheme.value}: sizes={spec.sizes}{skew}")
    return spec


def label_skew_stats(spec: PartitionSpec, labels: np.ndarray) -> float:
    """Mean over classes of the largest single-client share of that class"""
    labels = np.asarray(labels).astype(np.int64)
    shares = []
    for k in np.unique(labels):
        per_client = [np.sum(labels[idx] == k) for idx in spec.client_indices]
        shares.append(max(per_client) / max(1, sum(per_client)))
    return float(np.mean(shares))


@dataclass
class AlignedDataset:
    """Outer join of two keyed parties with zero padding"""
    features: np.ndarray
    labels: np.ndarray  # NaN where the label owner lacks the row
    keys: List[str]
    widths: Tuple[int, int]
    present: np.ndarray  # (rows, 2) bool, which party held the row
    n_classes: int = 0

    @property
    def labeled(self) -> np.ndarray:
        return ~np.isnan(self.labels.astype(np.float64))

    def party_slices(self) -> List[slice]:
        d_a, d_b = self.widths
        return [slice(0, d_a), slice(d_a, d_a + d_b)]

    def to_dataset(self, name: str = "aligned") -> Dataset:
        """Labeled rows only, labels cast back to classes where applicable"""
        mask = self.labeled
        labels = self.labels[mask]
        if self.n_classes:
            labels = labels.astype(np.int64)
        return Dataset(
            features=self.features[mask],
            labels=labels,
            name=name,
            keys=[k for k, m in zip(self.keys, mask) if m],
            n_classes=self.n_classes,
        )


def align_vertical(ds_a: Dataset, ds_b: Dataset, label_owner: int = 0) -> AlignedDataset:
    """Outer join on keys; a side missing a row contributes zeros"""
    if ds_a.keys is None or ds_b.keys is None:
        raise AlignmentError("both datasets need join keys")
    for ds in (ds_a, ds_b):
        if len(set(ds.keys)) != len(ds.keys):
            raise AlignmentError(f"duplicate join keys in {ds.name}")
    if label_owner not in (0, 1):
        raise AlignmentError(f"label_owner must be 0 or 1, got {label_owner}")

    pos_a = {k: i for i, k in enumerate(ds_a.keys)}
    pos_b = {k: i for i, k in enumerate(ds_b.keys)}
    keys = list(ds_a.keys) + [k for k in ds_b.keys if k not in pos_a]

    d_a, d_b = ds_a.n_features, ds_b.n_features
    features = np.zeros((len(keys), d_a + d_b))
    labels = np.full(len(keys), np.nan)
    present = np.zeros((len(keys), 2), dtype=bool)
    owner, owner_pos = (ds_a, pos_a) if label_owner == 0 else (ds_b, pos_b)
    for row, key in enumerate(keys):
        if key in pos_a:
            features[row, :d_a] = ds_a.features[pos_a[key]]
            present[row, 0] = True
        if key in pos_b:
            features[row, d_a:] = ds_b.features[pos_b[key]]
            present[row, 1] = True
        if key in owner_pos:
            labels[row] = owner.labels[owner_pos[key]]
    return AlignedDataset(
        features=features,
        labels=labels,
        keys=keys,
        widths=(d_a, d_b),
        present=present,
        n_classes=owner.n_classes,
    )


def synth_dataset(
    kind: str,
    n: int,
    d: int,
    classes: int = 2,
    noise: float = 1.0,
    seed: int = 0,
    separation: float = 3.0,
) -> Dataset:
    """Gaussian blobs or a noisy linear regression problem"""
    if n < 1 or d < 1 or classes < 1:
        raise ValueError(f"n, d and classes must be >= 1, got {n}, {d}, {classes}")
    rng = SeededRng(seed).derive(5)
    if kind == "blobs-classification":
        centers = separation * rng.normal(size=(classes, d))
        labels = np.arange(n) % classes
        labels = labels[rng.permutation(n)]
        features = centers[labels] + noise * rng.normal(size=(n, d))
        return Dataset(
            features, labels.astype(np.int64), name="blobs", n_classes=classes,
            meta={"centers": centers},
        )
    if kind == "linear-regression":
        w_star = rng.normal(size=d)
        features = rng.normal(size=(n, d))
        targets = features @ w_star + noise * rng.normal(size=n)
        return Dataset(features, targets, name="regression", meta={"true_weights": w_star})
    raise ValueError(f"unknown synthetic dataset kind: {kind}")


def split_vertical(
    ds: Dataset, width_a: int, overlap: float = 1.0, seed: int = 0
) -> Tuple[Dataset, Dataset]:
    """Column split into two keyed parties; party A owns the labels"""
    if not 0 < width_a < ds.n_features:
        raise ValueError(f"width_a must be inside (0, {ds.n_features}), got {width_a}")
    if not 0 < overlap <= 1:
        raise ValueError(f"overlap must be in (0, 1], got {overlap}")
    keys = [f"k{i:06d}" for i in range(len(ds))]
    party_a = Dataset(
        ds.features[:, :width_a], ds.labels, name=f"{ds.name}/A", keys=keys,
        n_classes=ds.n_classes,
    )
    keep = np.arange(len(ds))
    if overlap < 1:
        n_keep = max(1, int(round(overlap * len(ds))))
        keep = np.sort(SeededRng(seed).derive(6).permutation(len(ds))[:n_keep])
    party_b = Dataset(
        ds.features[keep, width_a:], ds.labels[keep], name=f"{ds.name}/B",
        keys=[keys[i] for i in keep], n_classes=ds.n_classes,
    )
    return party_a, party_b


def load_csv(path: str, classification: bool = True, key_column: str = "key") -> Dataset:
    """Header row, last column is the label, optional key column"""
    frame = pd.read_csv(path, encoding="utf-8")
    keys = None
    if key_column in frame.columns:
        keys = frame.pop(key_column).astype(str).tolist()
    if frame.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    label_col = frame.columns[-1]
    features = frame.drop(columns=[label_col]).to_numpy(dtype=np.float64)
    labels = frame[label_col].to_numpy()
    n_classes = 0
    if classification:
        codes, uniques = pd.factorize(labels, sort=True)
        labels, n_classes = codes.astype(np.int64), len(uniques)
    else:
        labels = labels.astype(np.float64)
    return Dataset(features, labels, name=str(path), keys=keys, n_classes=n_classes)


def save_csv(ds: Dataset, path: str) -> None:
    frame = pd.DataFrame(ds.features, columns=[f"x{i}" for i in range(ds.n_features)])
    if ds.keys is not None:
        frame.insert(0, "key", ds.keys)
    frame["label"] = ds.labels
    frame.to_csv(path, index=False, encoding="utf-8")
