"""
Secure Aggregation
Additive secret sharing over a fixed-point modular ring.

Each client encodes its update into Z_Q, splits it into K parts that sum to the
encoding mod Q, sends K-1 parts to the next clients in participant order and
keeps the last one. Every client uploads the sum of what it kept and what it
received; the server only ever sees masked vectors whose total is the true sum.

Only a curious server is defended against. With two participants each client can
subtract its own contribution from the decoded total, so the scheme protects
clients from the server but not from each other.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from loguru import logger

from core.numkit import SeededRng, check_finite

DEFAULT_MODULUS = (1 << 61) - 1
DEFAULT_SCALE = 2.0 ** -20
SHARE_HEADER_BYTES = 8


class ShareError(ValueError):
    """Invalid share layout or a missing share"""


class WraparoundError(ValueError):
    """A value is too large to survive the ring sum"""


@dataclass(frozen=True)
class FixedCodec:
    """Fixed-point map between reals and Z_Q"""
    scale: float = DEFAULT_SCALE
    modulus: int = DEFAULT_MODULUS
    max_abs: Optional[float] = None  # per-coordinate bound enforced on encode

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        # Pairwise sums of residues must fit in int64
        if not 2 < self.modulus < (1 << 62):
            raise ValueError(f"modulus must be in (2, 2^62), got {self.modulus}")

    def capacity(self, n_clients: int) -> float:
        """Largest magnitude whose n-fold sum still decodes without wraparound"""
        return (self.modulus / (2.0 * n_clients)) * self.scale

    def encode(self, values, n_clients: int = 1) -> np.ndarray:
        v = check_finite(values, "values to encode")
        peak = float(np.max(np.abs(v))) if v.size else 0.0
        if self.max_abs is not None and peak > self.max_abs:
            raise WraparoundError(f"|value| {peak:.6g} exceeds the encoding bound {self.max_abs}")
        if peak >= self.capacity(n_clients):
            raise WraparoundError(
                f"|value| {peak:.6g} would wrap around a {n_clients}-client sum mod {self.modulus}"
            )
        return np.mod(np.rint(v / self.scale).astype(np.int64), self.modulus)

    def decode(self, encoded) -> np.ndarray:
        x = np.asarray(encoded, dtype=np.int64)
        signed = np.where(x > self.modulus // 2, x - self.modulus, x)
        return signed.astype(np.float64) * self.scale


def encode_fixed(v, codec: FixedCodec, n_clients: int = 1) -> np.ndarray:
    return codec.encode(getattr(v, "values", v), n_clients)


def decode_fixed(encoded, codec: FixedCodec) -> np.ndarray:
    return codec.decode(encoded)


def ring_add(a: np.ndarray, b: np.ndarray, modulus: int) -> np.ndarray:
    """(a + b) mod Q for residues in [0, Q)"""
    return np.mod(a + b, modulus)


def ring_sum(vectors: Sequence[np.ndarray], modulus: int) -> np.ndarray:
    if not vectors:
        raise ShareError("nothing to sum")
    total = np.zeros_like(np.asarray(vectors[0], dtype=np.int64))
    for vec in vectors:
        total = ring_add(total, np.asarray(vec, dtype=np.int64), modulus)
    return total


def share_wire_bytes(length: int) -> int:
    """Length-prefixed vector of 64-bit little-endian residues"""
    return SHARE_HEADER_BYTES + 8 * int(length)


def serialize_share(part: np.ndarray) -> bytes:
    arr = np.asarray(part, dtype="<u8")
    return int(arr.size).to_bytes(SHARE_HEADER_BYTES, "little") + arr.tobytes()


def deserialize_share(blob: bytes) -> np.ndarray:
    n = int.from_bytes(blob[:SHARE_HEADER_BYTES], "little")
    arr = np.frombuffer(blob[SHARE_HEADER_BYTES:], dtype="<u8")
    if arr.size != n:
        raise ShareError(f"share header says {n} residues, payload has {arr.size}")
    return arr.astype(np.int64)


@dataclass
class ShareBundle:
    """K parts of one client's encoded update and where each part goes"""
    owner: int
    parts: List[np.ndarray]
    routing: Dict[int, int]  # part index (1-based) -> participant position; part K stays home

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    @property
    def kept(self) -> np.ndarray:
        return self.parts[-1]

    def outgoing(self):
        """(destination position, part) for every part that leaves the owner"""
        return [(self.routing[j], self.parts[j - 1]) for j in range(1, self.n_parts)]


def make_shares(
    g_enc: np.ndarray,
    k: int,
    modulus: int,
    rng: SeededRng,
    owner: int = 0,
    n_clients: Optional[int] = None,
) -> ShareBundle:
    """Split g_enc into k parts; parts 1..k-1 are uniform, part k closes the sum"""
    n = k if n_clients is None else n_clients
    if not 2 <= k <= n:
        raise ShareError(f"K must satisfy 2 <= K <= N, got K={k}, N={n}")
    if not 0 <= owner < n:
        raise ShareError(f"owner position {owner} outside [0, {n})")
    g = np.mod(np.asarray(g_enc, dtype=np.int64), modulus)

    parts = [rng.integers(0, modulus, size=g.shape) for _ in range(k - 1)]
    acc = np.zeros_like(g)
    for part in parts:
        acc = ring_add(acc, part, modulus)
    parts.append(np.mod(g - acc, modulus))
    routing = {j: (owner + j) % n for j in range(1, k)}
    routing[k] = owner
    return ShareBundle(owner=owner, parts=parts, routing=routing)


def combine_shares(
    own_part: np.ndarray, received: Sequence[np.ndarray], modulus: int, expected: int
) -> np.ndarray:
    """Masked upload g' = kept part + every part received from other clients"""
    if len(received) != expected:
        raise ShareError(f"expected {expected} received parts, got {len(received)}")
    total = np.asarray(own_part, dtype=np.int64)
    for part in received:
        total = ring_add(total, np.asarray(part, dtype=np.int64), modulus)
    return total


def secure_aggregate(
    masked: Sequence[np.ndarray], codec: FixedCodec, strict: bool = True
) -> np.ndarray:
    """Server side: ring-sum every masked upload and decode"""
    total = ring_sum(list(masked), codec.modulus)
    decoded = codec.decode(total)
    if strict and codec.max_abs is not None:
        bound = len(masked) * codec.max_abs
        peak = float(np.max(np.abs(decoded))) if decoded.size else 0.0
        if peak > bound:
            raise WraparoundError(
                f"decoded aggregate magnitude {peak:.6g} exceeds {bound:.6g}; "
                "a share is missing or the sum wrapped"
            )
    return decoded


@dataclass
class SecureAggReport:
    """Aggregate plus the per-position traffic and work for the transport model"""
    aggregate: np.ndarray
    share_bytes_sent: List[int]
    share_bytes_received: List[int]
    upload_bytes: List[int]
    encrypt_units: List[int]  # coordinates processed in encode, share and combine
    server_units: int = 0
    masked: List[np.ndarray] = field(default_factory=list)


class SecureAggregator:
    """Runs one round of encode, share, route, combine and server sum"""

    def __init__(self, codec: FixedCodec, parts_sent: int):
        if parts_sent < 1:
            raise ShareError(f"parts_sent must be >= 1, got {parts_sent}")
        self.codec = codec
        self.parts_sent = parts_sent

    @property
    def k(self) -> int:
        return self.parts_sent + 1

    def run(self, contributions: Sequence[np.ndarray], rng: SeededRng) -> SecureAggReport:
        """Contributions are ordered by participant position"""
        n = len(contributions)
        if n < 2:
            raise ShareError("secure aggregation needs at least 2 participants")
        if self.k > n:
            raise ShareError(f"K={self.k} parts but only {n} participants")
        length = int(np.asarray(contributions[0]).size)
        modulus = self.codec.modulus

        bundles = []
        for pos, contrib in enumerate(contributions):
            enc = self.codec.encode(contrib, n_clients=n)
            bundle = make_shares(enc, self.k, modulus, rng.derive(pos), owner=pos, n_clients=n)
            bundles.append(bundle)

        inbox: List[List[np.ndarray]] = [[] for _ in range(n)]
        for bundle in bundles:
            for dest, part in bundle.outgoing():
                inbox[dest].append(part)

        masked = [
            combine_shares(bundles[pos].kept, inbox[pos], modulus, expected=self.parts_sent)
            for pos in range(n)
        ]
        aggregate = secure_aggregate(masked, self.codec)

        part_bytes = share_wire_bytes(length)
        logger.debug(f"secure aggregation: {n} clients, K={self.k}, {length} coordinates")
        return SecureAggReport(
            aggregate=aggregate,
            share_bytes_sent=[self.parts_sent * part_bytes] * n,
            share_bytes_received=[len(inbox[pos]) * part_bytes for pos in range(n)],
            upload_bytes=[part_bytes] * n,
            encrypt_units=[length * (1 + self.k + len(inbox[pos])) for pos in range(n)],
            server_units=length * n,
            masked=masked,
        )
