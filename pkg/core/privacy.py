"""
Differential Privacy
Update clipping with Gaussian noise, a Renyi-DP accountant for the sampled
Gaussian mechanism, and noise calibration against an (epsilon, delta) target.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy import special

from core.numkit import SeededRng, clip_to_norm

DEFAULT_ORDERS: Tuple[float, ...] = tuple(
    [1.5, 1.75, 2.0, 2.25, 2.5, 3.0, 3.5, 4.0, 4.5]
    + [float(a) for a in range(5, 64)]
    + [128.0, 256.0]
)
DEFAULT_CLIP = 0.1
DEFAULT_ROUND_CAP = 300
_FRAC_SERIES_LIMIT = 10_000


class PrivacyError(ValueError):
    """Invalid privacy parameters or an unbounded privacy loss"""


def default_delta(n_samples: int) -> float:
    """min(1e-5, 1/N)"""
    if n_samples < 1:
        raise PrivacyError(f"need at least one training record, got {n_samples}")
    return min(1e-5, 1.0 / n_samples)


@dataclass
class DpConfig:
    clip: float = DEFAULT_CLIP
    sigma: float = 1.0
    target_epsilon: Optional[float] = None
    delta: float = 1e-5
    q: float = 1.0
    rounds: int = DEFAULT_ROUND_CAP

    def __post_init__(self):
        if self.clip <= 0:
            raise PrivacyError(f"clip must be > 0, got {self.clip}")
        if self.sigma < 0:
            raise PrivacyError(f"noise multiplier must be >= 0, got {self.sigma}")
        if not 0 < self.q <= 1:
            raise PrivacyError(f"sampling rate must be in (0, 1], got {self.q}")
        if not 0 < self.delta < 1:
            raise PrivacyError(f"delta must be in (0, 1), got {self.delta}")


def dp_sanitize(grad, clip: float, sigma: float, rng: SeededRng) -> np.ndarray:
    """clip_to_norm(grad, C) + N(0, (sigma*C)^2 I)"""
    if sigma < 0:
        raise PrivacyError(f"noise multiplier must be >= 0, got {sigma}")
    clipped = clip_to_norm(getattr(grad, "values", grad), clip)
    if sigma == 0:
        return clipped
    return clipped + rng.normal(0.0, sigma * clip, size=clipped.shape)


def _log_sub(x: float, y: float) -> float:
    """log(exp(x) - exp(y)) for x >= y"""
    if y == -np.inf:
        return x
    if x <= y:
        return -np.inf
    return x + math.log(-math.expm1(y - x))


def _log_erfc(x: float) -> float:
    return math.log(2.0) + special.log_ndtr(-x * math.sqrt(2.0))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    i = np.arange(alpha + 1, dtype=np.float64)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(i + 1)
    log_binom -= special.gammaln(alpha - i + 1)
    terms = log_binom + i * math.log(q) + (alpha - i) * math.log1p(-q)
    terms += (i * i - i) / (2 * sigma**2)
    return float(special.logsumexp(terms))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    """Series for fractional orders; the two tails are summed until both fall below e^-30"""
    log_a0, log_a1 = -np.inf, -np.inf
    z0 = sigma**2 * math.log(1 / q - 1) + 0.5
    for i in range(_FRAC_SERIES_LIMIT):
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * sigma**2) + log_e1
        if coef > 0:
            log_a0 = np.logaddexp(log_a0, log_s0)
            log_a1 = np.logaddexp(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        if max(log_s0, log_s1) < -30:
            break
    return float(np.logaddexp(log_a0, log_a1))


def rdp_gaussian(q: float, sigma: float, alpha: float) -> float:
    """RDP of one sampled Gaussian step at order alpha"""
    if q == 0:
        return 0.0
    if sigma <= 0:
        return np.inf
    if q == 1.0:
        return alpha / (2 * sigma**2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return log_a / (alpha - 1)


def compute_rdp(
    q: float, sigma: float, steps: int, orders: Sequence[float] = DEFAULT_ORDERS
) -> np.ndarray:
    """RDP curve of `steps` composed sampled Gaussian steps"""
    if not 0 <= q <= 1:
        raise PrivacyError(f"sampling rate must be in [0, 1], got {q}")
    return np.array([rdp_gaussian(q, sigma, a) for a in orders]) * steps


def eps_from_rdp(
    rdp: np.ndarray, delta: float, orders: Sequence[float] = DEFAULT_ORDERS
) -> Tuple[float, float]:
    """Convert an RDP curve to (epsilon, best order)"""
    if not 0 < delta < 1:
        raise PrivacyError(f"delta must be in (0, 1), got {delta}")
    orders_arr = np.asarray(orders, dtype=np.float64)
    eps = np.asarray(rdp, dtype=np.float64) + math.log(1 / delta) / (orders_arr - 1)
    eps = np.where(np.isnan(eps), np.inf, eps)
    best = int(np.argmin(eps))
    return float(eps[best]), float(orders_arr[best])


def rdp_epsilon(
    q: float, sigma: float, rounds: int, delta: float, orders: Sequence[float] = DEFAULT_ORDERS
) -> float:
    """Epsilon after `rounds` sampled Gaussian steps at the given delta"""
    if rounds < 0:
        raise PrivacyError(f"rounds must be >= 0, got {rounds}")
    if sigma <= 0:
        raise PrivacyError(f"noise multiplier {sigma} gives no finite privacy bound")
    eps, _ = eps_from_rdp(compute_rdp(q, sigma, rounds, orders), delta, orders)
    if not np.isfinite(eps):
        raise PrivacyError(f"noise multiplier {sigma} gives no finite privacy bound")
    return eps


def calibrate_sigma(
    target_epsilon: float,
    delta: float,
    q: float,
    rounds: int = DEFAULT_ROUND_CAP,
    rel_tol: float = 1e-3,
    max_sigma: float = 1e6,
) -> float:
    """Smallest noise multiplier (to rel_tol) whose epsilon meets the target"""
    if target_epsilon <= 0:
        raise PrivacyError(f"target epsilon must be > 0, got {target_epsilon}")

    def fits(sigma: float) -> bool:
        return rdp_epsilon(q, sigma, rounds, delta) <= target_epsilon

    hi = 1.0
    while not fits(hi):
        hi *= 2.0
        if hi > max_sigma:
            raise PrivacyError(
                f"no noise multiplier below {max_sigma} reaches epsilon={target_epsilon}"
            )
    lo = hi / 2.0
    while fits(lo):
        hi, lo = lo, lo / 2.0
        if lo < 1e-6:
            return hi
    while (hi - lo) / hi > rel_tol:
        mid = 0.5 * (lo + hi)
        if fits(mid):
            hi = mid
        else:
            lo = mid
    logger.debug(
        f"calibrated sigma={hi:.5g} for eps={target_epsilon}, "
        f"delta={delta:.3g}, q={q:.4g}, T={rounds}"
    )
    return hi


@dataclass
class PrivacyLedger:
    """One client's spent privacy: (q, sigma) per round and the composed RDP curve"""
    delta: float
    orders: Tuple[float, ...] = DEFAULT_ORDERS
    history: List[Tuple[float, float]] = field(default_factory=list)
    rdp: Optional[np.ndarray] = None

    def record(self, q: float, sigma: float) -> float:
        """Charge one round and return epsilon so far"""
        step = compute_rdp(q, sigma, 1, self.orders)
        self.rdp = step if self.rdp is None else self.rdp + step
        self.history.append((float(q), float(sigma)))
        return self.epsilon()

    def epsilon(self) -> float:
        if self.rdp is None:
            return 0.0
        eps, _ = eps_from_rdp(self.rdp, self.delta, self.orders)
        return eps

    @property
    def rounds(self) -> int:
        return len(self.history)

    def merged(self, other: "PrivacyLedger") -> "PrivacyLedger":
        """Ledger of both histories composed jointly"""
        if other.orders != self.orders:
            raise PrivacyError("ledgers use different order grids")
        parts = [r for r in (self.rdp, other.rdp) if r is not None]
        rdp = sum(parts) if parts else None
        return PrivacyLedger(self.delta, self.orders, self.history + other.history, rdp)


def worst_epsilon(ledgers: Sequence[PrivacyLedger]) -> Optional[float]:
    """Reported epsilon of a run: the largest over clients"""
    spent = [led.epsilon() for led in ledgers if led.rounds]
    return max(spent) if spent else None
