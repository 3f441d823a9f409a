"""
Gradient Compression
TopK / RandK sparsification and warm-started low-rank power iteration,
damped error feedback, and byte-exact wire sizes.

Wire format (little-endian):
  dense:    u64 length | f32 values
  sparse:   u64 length | u64 count | i64 indices | f32 values
  low-rank: u64 length | per segment: matrix -> u64 rank | f32 P | f32 Q
                                      vector -> f32 values
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from loguru import logger

from models import CompressionMethod
from core.mlp import ParamLayout, ParamVector
from core.numkit import SeededRng, check_finite

HEADER_BYTES = 8
VALUE_BYTES = 4
INDEX_BYTES = 8


class CompressionError(ValueError):
    """Invalid compressor parameters or payload"""


def dense_wire_bytes(length: int) -> int:
    """Uncompressed float32 payload"""
    return HEADER_BYTES + VALUE_BYTES * int(length)


def sparse_wire_bytes(count: int) -> int:
    return 2 * HEADER_BYTES + (INDEX_BYTES + VALUE_BYTES) * int(count)


@dataclass
class CompressedGrad:
    """Sparse (indices + values) or low-rank (P, Q per matrix segment) payload"""
    method: CompressionMethod
    length: int
    indices: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    factors: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    raw: Dict[str, np.ndarray] = field(default_factory=dict)
    layout: Optional[ParamLayout] = None

    @property
    def is_sparse(self) -> bool:
        return self.indices is not None

    @property
    def wire_bytes(self) -> int:
        if self.is_sparse:
            return sparse_wire_bytes(self.indices.size)
        total = HEADER_BYTES
        for seg in self.layout.segments:
            if seg.name in self.factors:
                p, q = self.factors[seg.name]
                total += HEADER_BYTES + VALUE_BYTES * (p.size + q.size)
            else:
                total += VALUE_BYTES * seg.size
        return total

    def decompress(self) -> np.ndarray:
        out = np.zeros(self.length)
        if self.is_sparse:
            out[self.indices] = self.values
            return out
        for seg in self.layout.segments:
            block = out[seg.offset:seg.offset + seg.size]
            if seg.name in self.factors:
                p, q = self.factors[seg.name]
                block[:] = (p @ q.T).reshape(-1)
            else:
                block[:] = self.raw[seg.name]
        return out

    def serialize(self) -> bytes:
        chunks = [np.uint64(self.length).astype("<u8").tobytes()]
        if self.is_sparse:
            chunks.append(np.uint64(self.indices.size).astype("<u8").tobytes())
            chunks.append(self.indices.astype("<i8").tobytes())
            chunks.append(self.values.astype("<f4").tobytes())
        else:
            for seg in self.layout.segments:
                if seg.name in self.factors:
                    p, q = self.factors[seg.name]
                    chunks.append(np.uint64(p.shape[1]).astype("<u8").tobytes())
                    chunks.append(p.astype("<f4").tobytes())
                    chunks.append(q.astype("<f4").tobytes())
                else:
                    chunks.append(self.raw[seg.name].astype("<f4").tobytes())
        return b"".join(chunks)


def _flat(g) -> np.ndarray:
    return check_finite(getattr(g, "values", g), "gradient").reshape(-1)


def _keep_count(k_fraction: float, length: int) -> int:
    if not 0 < k_fraction <= 1:
        raise CompressionError(f"k fraction must be in (0, 1], got {k_fraction}")
    # Guard against 0.01 * 1e5 landing a hair above 1000
    return max(1, min(length, math.ceil(k_fraction * length - 1e-9)))


def topk_compress(g, k_fraction: float) -> CompressedGrad:
    """Keep the ceil(k * len) largest-magnitude entries, ties to the lower index"""
    v = _flat(g)
    k = _keep_count(k_fraction, v.size)
    chosen = np.sort(np.argsort(-np.abs(v), kind="stable")[:k])
    return CompressedGrad(CompressionMethod.TOPK, v.size, indices=chosen, values=v[chosen].copy())


def randk_compress(g, k_fraction: float, rng: SeededRng, rescale: bool = False) -> CompressedGrad:
    """Uniform index subset without replacement; optional 1/k rescale for unbiasedness"""
    v = _flat(g)
    k = _keep_count(k_fraction, v.size)
    chosen = np.sort(rng.choice(v.size, size=k, replace=False))
    values = v[chosen].copy()
    if rescale:
        values = values * (v.size / k)
    return CompressedGrad(CompressionMethod.RANDK, v.size, indices=chosen, values=values)


def _orthonormalize(x: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(x)
    return q


def lowrank_compress(
    g: ParamVector,
    rank: int,
    rng: Optional[SeededRng] = None,
    warm: Optional[Dict[str, np.ndarray]] = None,
) -> CompressedGrad:
    """
    One power-iteration step per matrix segment.

    With a warm start P_prev the step is Q = orth(M^T P_prev), P = M Q. Without one,
    a random Q0 seeds P_prev = M Q0 first. Vector segments travel raw. `warm`
    is updated in place with the new P factors.
    """
    if rank < 1:
        raise CompressionError(f"rank must be >= 1, got {rank}")
    if not isinstance(g, ParamVector):
        raise CompressionError("low-rank compression needs the parameter layout")
    check_finite(g.values, "gradient")
    warm = {} if warm is None else warm
    rng = rng or SeededRng(0)

    factors, raw = {}, {}
    for seg in g.layout.segments:
        m = g.segment(seg.name)
        if m.ndim != 2:
            raw[seg.name] = m.copy()
            continue
        rows, cols = m.shape
        r = min(rank, rows, cols)
        if not np.any(m):
            factors[seg.name] = (np.zeros((rows, r)), np.zeros((cols, r)))
            continue
        p_prev = warm.get(seg.name)
        if p_prev is None or p_prev.shape != (rows, r):
            p_prev = m @ rng.derive(seg.layer).normal(size=(cols, r))
        q = _orthonormalize(m.T @ p_prev)
        p = m @ q
        warm[seg.name] = p
        factors[seg.name] = (p, q)
    return CompressedGrad(
        CompressionMethod.LOWRANK, len(g), factors=factors, raw=raw, layout=g.layout
    )


@dataclass
class EfState:
    """Accumulated compression error carried into the next round"""
    residual: np.ndarray
    damping: float = 0.5

    @classmethod
    def zeros(cls, length: int, damping: float = 0.5) -> "EfState":
        return cls(np.zeros(length), damping)


def error_feedback_apply(state: EfState, g) -> Tuple[np.ndarray, Callable[[np.ndarray], None]]:
    """Return g + residual and a hook that stores damping * (g_eff - decompressed)"""
    v = _flat(g)
    if v.shape != state.residual.shape:
        raise CompressionError(f"gradient length {v.size} != residual length {state.residual.size}")
    g_eff = v + state.residual

    def commit(decompressed: np.ndarray) -> None:
        state.residual = state.damping * (g_eff - np.asarray(decompressed, dtype=np.float64))

    return g_eff, commit


def wire_ratio(raw_bytes: float, compressed_bytes: float) -> float:
    if compressed_bytes <= 0:
        raise CompressionError(f"compressed size must be > 0, got {compressed_bytes}")
    if raw_bytes <= 0:
        raise CompressionError(f"raw size must be > 0, got {raw_bytes}")
    return raw_bytes / compressed_bytes


def end_to_end_ratio(per_round_ratio: float, rounds: float, baseline_rounds: float) -> float:
    """Per-round ratio discounted by the extra rounds needed to converge"""
    if rounds <= 0 or baseline_rounds <= 0:
        raise CompressionError("round counts must be > 0")
    return per_round_ratio * baseline_rounds / rounds


class Compressor:
    """One client's uplink compressor: method, error-feedback residual and warm factors"""

    def __init__(
        self,
        method: CompressionMethod,
        ratio: float = 0.01,
        rank: int = 1,
        error_feedback: bool = True,
        damping: float = 0.5,
        rescale: bool = False,
    ):
        if method != CompressionMethod.LOWRANK:
            _keep_count(ratio, 1)
        if not 0 <= damping <= 1:
            raise CompressionError(f"damping must be in [0, 1], got {damping}")
        self.method = method
        self.ratio = ratio
        self.rank = rank
        self.error_feedback = error_feedback
        self.damping = damping
        self.rescale = rescale
        self.ef: Optional[EfState] = None
        self.warm: Dict[str, np.ndarray] = {}

    def compress(self, g: ParamVector, rng: SeededRng) -> Tuple[CompressedGrad, ParamVector]:
        """Returns the payload and the vector the server will reconstruct"""
        commit = None
        target = g
        if self.error_feedback:
            if self.ef is None:
                self.ef = EfState.zeros(len(g), self.damping)
            g_eff, commit = error_feedback_apply(self.ef, g)
            target = g.with_values(g_eff)

        if self.method == CompressionMethod.TOPK:
            payload = topk_compress(target, self.ratio)
        elif self.method == CompressionMethod.RANDK:
            payload = randk_compress(target, self.ratio, rng, self.rescale)
        else:
            payload = lowrank_compress(target, self.rank, rng, self.warm)

        restored = payload.decompress()
        if commit is not None:
            commit(restored)
        logger.trace(
            f"{self.method.value}: {payload.wire_bytes} bytes vs {dense_wire_bytes(len(g))} dense"
        )
        return payload, g.with_values(restored)
