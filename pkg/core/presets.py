"""
Preset Catalog
Reference experiments, one per benchmarked technique
"""

import copy
from typing import Any, Dict, List


class Preset:
    """Named configuration fragment merged under user YAML"""

    def __init__(self, name: str, description: str, overrides: Dict[str, Any]):
        self.name = name
        self.description = description
        self.overrides = overrides

    def to_config(self) -> Dict[str, Any]:
        return copy.deepcopy(self.overrides)


# Shared pieces. Blob centers sit about 4 noise units apart, well short of separable.
BLOBS = {
    "kind": "blobs-classification",
    "n_samples": 6000,
    "n_features": 32,
    "n_classes": 10,
    "noise": 1.0,
    "separation": 0.5,
}
FEDSGD = {"name": "fedsgd", "lr": 0.1, "max_rounds": 200, "patience": 10}
FEDAVG = {
    "name": "fedavg",
    "fraction": 0.4,
    "local_epochs": 2,
    "batch_size": 32,
    "lr": 0.05,
    "max_rounds": 150,
    "patience": 10,
}
VERTICAL = {
    "kind": "vertical-blobs",
    "n_samples": 1200,
    "n_features": 8,
    "n_classes": 3,
    "noise": 1.0,
    "separation": 2.0,
    "party_a_features": 4,
    "overlap": 1.0,
}


class PresetLibrary:
    """Catalog of the reference experiments"""

    def __init__(self):
        self.presets = self._create_presets()

    def _create_presets(self) -> Dict[str, Preset]:
        presets = {}

        presets["baseline"] = Preset(
            name="baseline",
            description="FedSGD, 5 IID clients, full participation, no add-ons",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "iid", "n_clients": 5},
                "algorithm": dict(FEDSGD),
            },
        )

        presets["combined"] = Preset(
            name="combined",
            description="All training data pooled into one client",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "iid", "n_clients": 5},
                "mode": "combined",
                "algorithm": dict(FEDSGD),
            },
        )

        presets["solo"] = Preset(
            name="solo",
            description="One client trains on its own shard only",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "iid", "n_clients": 5},
                "mode": "solo",
                "solo_client": 0,
                "algorithm": dict(FEDSGD),
            },
        )

        # FedSGD aggregates full-batch gradients, which makes partitioning irrelevant;
        # skew only shows once clients drift over several local epochs
        presets["noniid-label"] = Preset(
            name="noniid-label",
            description="FedAvg on Dirichlet label-skewed shards",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "label-skew-dirichlet", "n_clients": 5, "alpha": 0.2},
                "algorithm": dict(FEDAVG),
            },
        )

        presets["noniid-quantity"] = Preset(
            name="noniid-quantity",
            description="FedAvg on Dirichlet quantity-skewed shards",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "quantity-skew-dirichlet", "n_clients": 5, "alpha": 0.2},
                "algorithm": dict(FEDAVG),
            },
        )

        presets["algorithms"] = Preset(
            name="algorithms",
            description="FedAvg with client sampling and local epochs",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "label-skew-dirichlet", "n_clients": 5, "alpha": 0.5},
                "algorithm": dict(FEDAVG),
            },
        )

        presets["algorithms-fedprox"] = Preset(
            name="algorithms-fedprox",
            description="FedProx with a proximal term",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "label-skew-dirichlet", "n_clients": 5, "alpha": 0.5},
                "algorithm": {**FEDAVG, "name": "fedprox", "mu": 0.01},
            },
        )

        presets["algorithms-fednova"] = Preset(
            name="algorithms-fednova",
            description="FedNova normalized averaging on quantity-skewed shards",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "quantity-skew-dirichlet", "n_clients": 5, "alpha": 0.5},
                "algorithm": {**FEDAVG, "name": "fednova"},
            },
        )

        presets["smc"] = Preset(
            name="smc",
            description="FedSGD with additive secret sharing, 2 parts sent per client",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "iid", "n_clients": 5},
                "algorithm": dict(FEDSGD),
                "secure_agg": {"parts_sent": 2},
            },
        )

        presets["dp"] = Preset(
            name="dp",
            description="FedAvg with clipped, noised client updates at epsilon = 2",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "iid", "n_clients": 5},
                "algorithm": {**FEDAVG, "fraction": 1.0, "local_epochs": 1, "lr": 0.1},
                "privacy": {"epsilon": 2.0, "clip": 0.1, "max_rounds": 150},
            },
        )

        presets["compression"] = Preset(
            name="compression",
            description="FedSGD with TopK 1% uplink sparsification and error feedback",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "iid", "n_clients": 5},
                "algorithm": dict(FEDSGD),
                "compression": {"method": "topk", "ratio": 0.01},
            },
        )

        presets["compression-randk"] = Preset(
            name="compression-randk",
            description="FedSGD with unscaled RandK 1% uplink sparsification",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "iid", "n_clients": 5},
                "algorithm": dict(FEDSGD),
                "compression": {"method": "randk", "ratio": 0.01},
            },
        )

        presets["compression-lowrank"] = Preset(
            name="compression-lowrank",
            description="FedSGD with rank-3 power-iteration compression",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "iid", "n_clients": 5},
                "algorithm": dict(FEDSGD),
                "compression": {"method": "lowrank", "rank": 3},
            },
        )

        presets["compression-local-epochs"] = Preset(
            name="compression-local-epochs",
            description="Fewer rounds through more local work: FedAvg with 5 local epochs",
            overrides={
                "workload": dict(BLOBS),
                "partition": {"scheme": "iid", "n_clients": 5},
                "algorithm": {**FEDAVG, "fraction": 1.0, "local_epochs": 5},
            },
        )

        presets["hybrid"] = Preset(
            name="hybrid",
            description="Secret sharing (2 parts), DP (epsilon 1), TopK 1% over 100 Mbps",
            overrides={
                "workload": {**BLOBS, "n_samples": 2400},
                "partition": {"scheme": "iid", "n_clients": 5},
                "algorithm": dict(FEDSGD),
                "secure_agg": {"parts_sent": 2},
                "privacy": {"epsilon": 1.0, "clip": 0.1, "max_rounds": 300},
                "compression": {"method": "topk", "ratio": 0.01},
                "channel": {"bandwidth_mbps": 100.0},
            },
        )

        presets["vertical-baseline"] = Preset(
            name="vertical-baseline",
            description="One model on the aligned, concatenated features of both parties",
            overrides={
                "workload": dict(VERTICAL),
                "partition": {"n_clients": 2},
                "mode": "vertical-combined",
                "algorithm": {"name": "fedsgd", "batch_size": 32, "lr": 0.05, "max_rounds": 100},
            },
        )

        presets["vertical-splitnn"] = Preset(
            name="vertical-splitnn",
            description="SplitNN over two parties holding disjoint feature columns",
            overrides={
                "workload": dict(VERTICAL),
                "partition": {"n_clients": 2},
                "mode": "splitnn",
                "algorithm": {"name": "fedsgd", "batch_size": 32, "lr": 0.05, "max_rounds": 100},
            },
        )

        return presets

    def get(self, name: str) -> Preset:
        if name not in self.presets:
            raise KeyError(f"unknown preset: {name}")
        return self.presets[name]

    def names(self) -> List[str]:
        return list(self.presets)


_LIBRARY = PresetLibrary()


def get_preset(name: str) -> Dict[str, Any]:
    return _LIBRARY.get(name).to_config()


def preset_names() -> List[str]:
    return _LIBRARY.names()


def describe_presets() -> List[Dict[str, str]]:
    return [{"name": p.name, "description": p.description} for p in _LIBRARY.presets.values()]
