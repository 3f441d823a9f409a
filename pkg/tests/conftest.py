"""Shared fixtures: small seeded datasets, model specs and config builders"""

import numpy as np
import pytest

from models import Activation, OutputHead
from core.config import build_config, deep_merge
from core.data import synth_dataset
from core.mlp import MlpSpec
from core.numkit import SeededRng

SMALL_CONFIG = {
    "name": "unit",
    "workload": {
        "kind": "blobs-classification",
        "n_samples": 240,
        "n_features": 4,
        "n_classes": 3,
        "noise": 1.0,
        "separation": 2.0,
    },
    "partition": {"scheme": "iid", "n_clients": 4},
    "algorithm": {"name": "fedsgd", "max_rounds": 4, "lr": 0.1},
}


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def blobs():
    return synth_dataset("blobs-classification", 300, 4, classes=3, noise=1.0, seed=0)


@pytest.fixture
def regression():
    return synth_dataset("linear-regression", 200, 3, noise=0.1, seed=0)


@pytest.fixture
def tanh_spec():
    return MlpSpec((4, 6, 3), Activation.TANH, OutputHead.SOFTMAX_CE)


@pytest.fixture
def make_config():
    """Small, fast experiment config with nested overrides"""

    def _make(**overrides):
        return build_config(deep_merge(SMALL_CONFIG, overrides))

    return _make


def finite_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of a flat vector"""
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (f(x + step) - f(x - step)) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(1e-12, np.linalg.norm(a) + np.linalg.norm(b)))
