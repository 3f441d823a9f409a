"""
Numeric Kit
Seeded randomness, norms, clipping and Dirichlet sampling shared by every engine
"""

from typing import Sequence, Tuple

import numpy as np


class NumericError(ValueError):
    """Invalid numeric input"""


def check_finite(values, what: str = "values") -> np.ndarray:
    """Return values as a float64 array, rejecting NaN/inf"""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite entries")
    return arr


class SeededRng:
    """
    Counter-based random stream keyed by (seed, *key).

    Child streams are derived from the key rather than from generator state,
    so a client's stream for a round never depends on who drew before it.
    """

    def __init__(self, seed: int, key: Tuple[int, ...] = ()):
        if seed < 0:
            raise NumericError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self.key]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def derive(self, *key: int) -> "SeededRng":
        """Independent child stream"""
        return SeededRng(self.seed, self.key + tuple(key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def gamma(self, shape: float, size=None):
        return self._gen.gamma(shape, 1.0, size)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, key={self.key})"


def l2_norm(v) -> float:
    """Euclidean norm of a flat or matrix-shaped array"""
    arr = check_finite(v, "vector")
    return float(np.sqrt(np.sum(arr * arr)))


def clip_to_norm(v, c: float) -> np.ndarray:
    """Scale v down so its L2 norm is at most c"""
    if c <= 0:
        raise NumericError(f"clip bound must be > 0, got {c}")
    arr = check_finite(v, "vector")
    norm = l2_norm(arr)
    if norm <= c:
        return arr.copy()
    return arr * (c / norm)


def sample_dirichlet(alpha: float, n: int, rng: SeededRng) -> np.ndarray:
    """Draw a point on the n-simplex from Dir_n(alpha) by normalizing Gamma draws"""
    if alpha <= 0:
        raise NumericError(f"Dirichlet concentration must be > 0, got {alpha}")
    if n < 1:
        raise NumericError(f"Dirichlet dimension must be >= 1, got {n}")
    if n == 1:
        return np.ones(1)

    draws = rng.gamma(alpha, size=n)
    total = draws.sum()
    if total <= 0 or not np.isfinite(total):
        # Every Gamma draw underflowed (tiny alpha): all mass on one vertex
        out = np.zeros(n)
        out[int(rng.integers(0, n))] = 1.0
        return out
    return draws / total


def largest_remainder(proportions: Sequence[float], total: int) -> np.ndarray:
    """Integer counts proportional to proportions that sum exactly to total"""
    p = np.asarray(proportions, dtype=np.float64)
    if total < 0:
        raise NumericError(f"total must be >= 0, got {total}")
    if p.size == 0 or np.any(p < 0) or p.sum() <= 0:
        raise NumericError("proportions must be non-negative with a positive sum")

    raw = p / p.sum() * total
    counts = np.floor(raw).astype(np.int64)
    remaining = int(total - counts.sum())
    if remaining > 0:
        # Stable sort keeps ties on the lower index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remaining]] += 1
    return counts
