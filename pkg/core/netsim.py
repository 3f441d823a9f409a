"""
Simulated Transport
Bandwidth/latency channels, a logical clock and the per-actor time ledger
that throughput and framework overhead are computed from.
"""

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from loguru import logger

from models import TimeBucket

NS_PER_SECOND = 1_000_000_000
SERVER = "server"


class LedgerError(ValueError):
    """Time accounting was violated"""


def client_actor(client_id: int) -> str:
    return f"client-{client_id}"


def to_ns(seconds: float) -> int:
    if seconds < 0 or math.isnan(seconds):
        raise LedgerError(f"durations must be >= 0, got {seconds}")
    return int(round(seconds * NS_PER_SECOND))


def to_seconds(ns: int) -> float:
    return ns / NS_PER_SECOND


@dataclass(frozen=True)
class Channel:
    """Point-to-point link; bandwidth in bits/second, None for unlimited"""
    bandwidth_bps: Optional[float] = None
    latency_s: float = 0.0

    def __post_init__(self):
        if self.bandwidth_bps is not None and self.bandwidth_bps <= 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth_bps}")
        if self.latency_s < 0:
            raise ValueError(f"latency must be >= 0, got {self.latency_s}")

    @classmethod
    def from_mbps(cls, mbps: Optional[float], latency_ms: float = 0.0) -> "Channel":
        return cls(None if mbps is None else mbps * 1e6, latency_ms / 1e3)


@dataclass
class SimClock:
    """Monotone logical clock in integer nanoseconds"""
    now_ns: int = 0

    def advance(self, ns: int) -> int:
        if ns < 0:
            raise LedgerError("the clock never moves backwards")
        self.now_ns += ns
        return self.now_ns

    @property
    def seconds(self) -> float:
        return to_seconds(self.now_ns)


def transmit(channel: Channel, n_bytes: int, clock: Optional[SimClock] = None) -> float:
    """latency + bytes * 8 / bandwidth seconds; advances the clock when given"""
    if n_bytes < 0:
        raise ValueError(f"byte count must be >= 0, got {n_bytes}")
    elapsed = channel.latency_s
    if channel.bandwidth_bps is not None:
        elapsed += n_bytes * 8 / channel.bandwidth_bps
    if clock is not None:
        clock.advance(to_ns(elapsed))
    return elapsed


@dataclass
class CostModel:
    """Seconds charged per unit of simulated work"""
    train_per_sample_param: float = 3e-8
    eval_per_sample_param: float = 1e-8
    dp_per_param: float = 2e-8
    compress_per_param: float = 4e-8
    encrypt_per_unit: float = 5e-8
    aggregate_per_unit: float = 2e-9
    serialize_per_byte: float = 1e-9
    schedule_per_client: float = 5e-5
    wall_clock: bool = False

    def train(self, samples: int, params: int, measured: Optional[float] = None) -> float:
        if self.wall_clock and measured is not None:
            return measured
        return samples * params * self.train_per_sample_param

    def evaluate(self, samples: int, params: int, measured: Optional[float] = None) -> float:
        if self.wall_clock and measured is not None:
            return measured
        return samples * params * self.eval_per_sample_param

    def sanitize(self, params: int) -> float:
        return params * self.dp_per_param

    def compress(self, params: int) -> float:
        return params * self.compress_per_param

    def encrypt(self, units: int) -> float:
        return units * self.encrypt_per_unit

    def aggregate(self, units: int) -> float:
        return units * self.aggregate_per_unit

    def serialize(self, n_bytes: int) -> float:
        return n_bytes * self.serialize_per_byte

    def schedule(self, n_clients: int) -> float:
        return n_clients * self.schedule_per_client


class Stopwatch:
    """perf_counter span for wall-clock cost mode"""

    def __init__(self):
        self.elapsed = 0.0

    @contextmanager
    def running(self):
        start = time.perf_counter()
        try:
            yield self
        finally:
            self.elapsed += time.perf_counter() - start


def _empty_buckets() -> Dict[TimeBucket, int]:
    return {bucket: 0 for bucket in TimeBucket}


@dataclass
class Phase:
    """Busy time reported by each actor during one barrier-synchronized phase"""
    name: str
    busy: Dict[str, Dict[TimeBucket, int]] = field(default_factory=dict)

    def charge(self, actor: str, bucket: TimeBucket, seconds: float) -> None:
        if bucket == TimeBucket.IDLE:
            raise LedgerError("idle time is derived, never charged")
        per_actor = self.busy.setdefault(actor, {})
        per_actor[bucket] = per_actor.get(bucket, 0) + to_ns(seconds)

    def report(self, actors: Iterable[str]) -> None:
        """Register actors that did nothing in this phase"""
        for actor in actors:
            self.busy.setdefault(actor, {})


@dataclass
class RoundTraffic:
    bytes_up: int = 0
    bytes_down: int = 0
    bytes_peer: int = 0


class TimeLedger:
    """Per-actor decomposition of simulated time into train/communicate/encrypt/idle/other"""

    def __init__(self, actors: List[str]):
        if len(set(actors)) != len(actors):
            raise LedgerError("duplicate actor names")
        self.actors = list(actors)
        self.clock = SimClock()
        self.totals = {a: _empty_buckets() for a in self.actors}
        self.traffic = {a: RoundTraffic() for a in self.actors}
        self.rows: List[dict] = []
        self._round: Optional[int] = None
        self._round_buckets: Dict[str, Dict[TimeBucket, int]] = {}
        self._round_traffic: Dict[str, RoundTraffic] = {}

    def begin_round(self, round_index: int) -> None:
        self._round = round_index
        self._round_buckets = {a: _empty_buckets() for a in self.actors}
        self._round_traffic = {a: RoundTraffic() for a in self.actors}

    def phase(self, name: str) -> Phase:
        return Phase(name)

    def log_bytes(self, actor: str, up: int = 0, down: int = 0, peer: int = 0) -> None:
        for book in (self.traffic, self._round_traffic):
            if actor not in book:
                raise LedgerError(f"unknown actor {actor}")
            book[actor].bytes_up += up
            book[actor].bytes_down += down
            book[actor].bytes_peer += peer

    def close(self, phase: Phase) -> float:
        return round_clock(self, phase)

    def end_round(self) -> Dict[str, Dict[str, float]]:
        """Check conservation, store per-actor rows, return this round's bucket seconds"""
        self.check_conservation()
        summary = {}
        for actor in self.actors:
            buckets = self._round_buckets[actor]
            traffic = self._round_traffic[actor]
            seconds = {b.value: to_seconds(ns) for b, ns in buckets.items()}
            summary[actor] = seconds
            self.rows.append({
                "round": self._round,
                "actor": actor,
                **seconds,
                "total": to_seconds(sum(buckets.values())),
                "bytes_up": traffic.bytes_up,
                "bytes_down": traffic.bytes_down,
                "bytes_peer": traffic.bytes_peer,
            })
        self._round = None
        return summary

    def check_conservation(self) -> None:
        for actor in self.actors:
            if sum(self.totals[actor].values()) != self.clock.now_ns:
                raise LedgerError(f"{actor}: bucket sum drifted from the clock")

    def total_seconds(self) -> float:
        return self.clock.seconds

    def bucket_seconds(self, actor: str, bucket: TimeBucket) -> float:
        return to_seconds(self.totals[actor][bucket])

    def _credit(self, actor: str, bucket: TimeBucket, ns: int) -> None:
        self.totals[actor][bucket] += ns
        if self._round is not None:
            self._round_buckets[actor][bucket] += ns


def round_clock(ledger: TimeLedger, phase: Phase) -> float:
    """
    Close a barrier phase: the phase lasts as long as the busiest actor, and
    everyone else is credited the difference as idle time.
    """
    missing = [a for a in ledger.actors if a not in phase.busy]
    if missing:
        raise LedgerError(f"phase {phase.name}: no report from {', '.join(missing)}")
    unknown = [a for a in phase.busy if a not in ledger.totals]
    if unknown:
        raise LedgerError(f"phase {phase.name}: unknown actors {', '.join(unknown)}")

    busy_ns = {a: sum(phase.busy[a].values()) for a in ledger.actors}
    span = max(busy_ns.values()) if busy_ns else 0
    for actor in ledger.actors:
        for bucket, ns in phase.busy[actor].items():
            ledger._credit(actor, bucket, ns)
        ledger._credit(actor, TimeBucket.IDLE, span - busy_ns[actor])
    ledger.clock.advance(span)
    logger.trace(f"phase {phase.name}: {to_seconds(span):.6f}s")
    return to_seconds(span)


def overhead_and_throughput(
    ledger: TimeLedger, samples_processed: int, actors: Optional[List[str]] = None
) -> Tuple[float, float]:
    """(t_total - t_train) / t_total averaged over actors, and samples per second"""
    total_ns = ledger.clock.now_ns
    if total_ns <= 0:
        raise LedgerError("no simulated time has elapsed")
    if actors is None:
        actors = [a for a in ledger.actors if a != SERVER] or ledger.actors
    overheads = [
        (total_ns - ledger.totals[a][TimeBucket.TRAIN]) / total_ns for a in actors
    ]
    overhead = sum(overheads) / len(overheads)
    return overhead, samples_processed / to_seconds(total_ns)


def ledger_rows(ledger: TimeLedger) -> List[dict]:
    """Per round, per actor: bucket seconds, total and bytes"""
    return list(ledger.rows)
