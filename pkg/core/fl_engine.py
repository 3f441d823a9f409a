"""
Horizontal FL Engine
Client sampling, local training, FedSGD / FedAvg / FedProx / FedNova aggregation,
and the synchronous round loop with privacy, compression and secure aggregation
stages on the upload path.
"""

import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from models import Algorithm, ClientUpdate, EvalMetric, ExperimentResult, RoundResult, TimeBucket
from core.compression import Compressor, dense_wire_bytes, wire_ratio
from core.config import AlgorithmConfig, ExperimentConfig
from core.data import Dataset
from core.mlp import (
    MlpSpec,
    OptimizerState,
    ParamVector,
    PlateauScheduler,
    backward,
    forward,
    init_params,
    optimizer_step,
    param_count,
)
from core.netsim import (
    SERVER,
    Channel,
    CostModel,
    Phase,
    Stopwatch,
    TimeLedger,
    client_actor,
    overhead_and_throughput,
    transmit,
)
from core.numkit import SeededRng
from core.privacy import (
    DpConfig,
    PrivacyLedger,
    calibrate_sigma,
    default_delta,
    dp_sanitize,
    worst_epsilon,
)
from core.secure_agg import FixedCodec, SecureAggregator
from core.stats import evaluate, reported_rounds

# Independent random streams, keyed with (client, round) below them
INIT_STREAM = 10
SAMPLE_STREAM = 11
TRAIN_STREAM = 12
DP_STREAM = 13
COMPRESS_STREAM = 14
SHARE_STREAM = 15


class AggregationError(ValueError):
    """Client updates cannot be combined"""


@dataclass
class FederatedTask:
    """Network layout plus the client shards and the server's evaluation sets"""
    spec: MlpSpec
    shards: List[Dataset]
    val: Dataset
    test: Dataset
    metric: EvalMetric
    client_ids: Optional[List[int]] = None  # actor ids, defaults to shard positions

    def __post_init__(self):
        if self.client_ids is None:
            self.client_ids = list(range(len(self.shards)))
        if len(self.client_ids) != len(self.shards):
            raise ValueError("one client id per shard")

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    @property
    def n_train(self) -> int:
        return sum(len(s) for s in self.shards)


def sample_clients(n_clients: int, fraction: float, rng: SeededRng) -> List[int]:
    """ceil(fraction * n) distinct ids, uniform without replacement, sorted"""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    k = min(n_clients, math.ceil(fraction * n_clients - 1e-9))
    if k >= n_clients:
        return list(range(n_clients))
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))


def batch_fraction(n_samples: int, algo: AlgorithmConfig) -> float:
    """Share of a client's records in one mini-batch"""
    if algo.name == Algorithm.FEDSGD or algo.batch_size <= 0:
        return 1.0
    return min(1.0, algo.batch_size / n_samples)


def local_train(
    shard: Dataset,
    spec: MlpSpec,
    global_params: ParamVector,
    algo: AlgorithmConfig,
    lr: float,
    rng: SeededRng,
    client_id: int = 0,
) -> ClientUpdate:
    """
    FedSGD: one full-pass mean gradient (tau = 1).
    Otherwise E epochs of mini-batch steps from the global model, returning
    w_local - w_global with tau = number of optimizer steps taken.
    """
    n = len(shard)
    if n == 0:
        raise AggregationError(f"client {client_id} has no training records")

    if algo.name == Algorithm.FEDSGD:
        _, cache = forward(spec, global_params, shard.features)
        grad = backward(spec, global_params, cache, shard.labels)
        return ClientUpdate(client_id, grad, local_steps=1, n_samples=n, samples_processed=n)

    batch = n if algo.batch_size <= 0 else min(algo.batch_size, n)
    state = OptimizerState(kind=algo.optimizer, lr=lr, momentum=algo.momentum)
    prox = algo.name == Algorithm.FEDPROX and algo.mu > 0
    params = global_params.copy()
    steps = 0
    for epoch in range(algo.local_epochs):
        order = rng.derive(epoch).permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            _, cache = forward(spec, params, shard.features[idx])
            grad = backward(spec, params, cache, shard.labels[idx])
            if prox:
                drift = params.values - global_params.values
                grad = grad.with_values(grad.values + algo.mu * drift)
            params, state = optimizer_step(state, params, grad)
            steps += 1
    delta = params.with_values(params.values - global_params.values)
    return ClientUpdate(
        client_id, delta, local_steps=steps, n_samples=n, samples_processed=n * algo.local_epochs
    )


def client_weight(update: ClientUpdate, total_samples: int, algorithm: Algorithm) -> float:
    """n_i / sum(n), divided by tau_i for FedNova"""
    weight = update.n_samples / total_samples
    if algorithm == Algorithm.FEDNOVA:
        weight /= update.local_steps
    return weight


def effective_steps(updates: Sequence[ClientUpdate]) -> float:
    """tau_eff = sum_i (n_i / sum n) tau_i"""
    total = sum(u.n_samples for u in updates)
    return sum(u.n_samples / total * u.local_steps for u in updates)


def apply_aggregate(
    summed: np.ndarray,
    algorithm: Algorithm,
    global_params: ParamVector,
    tau_eff: float = 1.0,
    server_state: Optional[OptimizerState] = None,
) -> Tuple[ParamVector, Optional[OptimizerState]]:
    """Turn the weighted sum of client payloads into the next global model"""
    if summed.shape != global_params.values.shape:
        raise AggregationError(
            f"aggregate length {summed.size} != model length {len(global_params)}"
        )
    if algorithm == Algorithm.FEDSGD:
        if server_state is None:
            raise AggregationError("fedsgd needs the server optimizer state")
        return optimizer_step(server_state, global_params, global_params.with_values(summed))
    scale = tau_eff if algorithm == Algorithm.FEDNOVA else 1.0
    new = global_params.with_values(global_params.values + scale * summed)
    if not new.is_finite():
        raise AggregationError("aggregated model is not finite")
    return new, server_state


def aggregate(
    updates: Sequence[ClientUpdate],
    algo: AlgorithmConfig,
    global_params: ParamVector,
    server_state: Optional[OptimizerState] = None,
) -> ParamVector:
    """Combine client updates in client-id order into the next global model"""
    if not updates:
        raise AggregationError("no client updates to aggregate")
    lengths = {len(u.payload) for u in updates}
    if len(lengths) != 1 or lengths.pop() != len(global_params):
        raise AggregationError("client payload lengths differ from the model")
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = sum(u.n_samples for u in ordered)
    summed = np.zeros(len(global_params))
    for u in ordered:
        summed = summed + client_weight(u, total, algo.name) * u.payload.values
    if algo.name == Algorithm.FEDSGD and server_state is None:
        server_state = OptimizerState(kind=algo.optimizer, lr=algo.lr, momentum=algo.momentum)
    tau_eff = effective_steps(ordered)
    params, _ = apply_aggregate(summed, algo.name, global_params, tau_eff, server_state)
    return params


class FederatedEngine:
    """Runs one seeded horizontal experiment"""

    def __init__(self, config: ExperimentConfig, task: FederatedTask, seed: int):
        self.config = config
        self.task = task
        self.seed = seed
        self.algo = config.algorithm
        self.rng = SeededRng(seed)
        self.spec = task.spec
        self.n_params = param_count(task.spec)
        self.params = init_params(task.spec, self.rng.derive(INIT_STREAM))
        self.scheduler = PlateauScheduler(
            lr=self.algo.lr,
            factor=self.algo.factor,
            patience=self.algo.patience,
            higher_is_better=task.metric.higher_is_better,
        )
        self.server_state = OptimizerState(
            kind=self.algo.optimizer, lr=self.algo.lr, momentum=self.algo.momentum
        )
        self.actors = {pos: client_actor(cid) for pos, cid in enumerate(task.client_ids)}
        self.ledger = TimeLedger([SERVER] + list(self.actors.values()))
        self.channel = Channel.from_mbps(config.channel.bandwidth_mbps, config.channel.latency_ms)
        self.cost = CostModel(
            train_per_sample_param=config.cost.train_per_sample_param,
            eval_per_sample_param=config.cost.eval_per_sample_param,
            encrypt_per_unit=config.cost.encrypt_per_unit,
            wall_clock=config.cost.wall_clock,
        )
        self._setup_privacy()
        self._setup_secure_agg()
        self._setup_compression()
        self.bytes_raw = 0
        self.bytes_wire = 0
        self.samples_processed = 0
        self.privacy_rows: List[dict] = []

    def _setup_privacy(self):
        self.dp: Optional[DpConfig] = None
        self.privacy_ledgers: Dict[int, PrivacyLedger] = {}
        dp = self.config.privacy
        if dp is None:
            return
        self.q = [batch_fraction(len(s), self.algo) for s in self.task.shards]
        delta = dp.delta if dp.delta is not None else default_delta(self.task.n_train)
        q_max = max(self.q)
        if dp.noise_multiplier is not None:
            sigma = dp.noise_multiplier
        else:
            sigma = calibrate_sigma(dp.epsilon, delta, q_max, dp.max_rounds)
        self.dp = DpConfig(dp.clip, sigma, dp.epsilon, delta, q_max, dp.max_rounds)
        self.privacy_ledgers = {
            pos: PrivacyLedger(delta) for pos in range(self.task.n_clients)
        }
        logger.info(
            f"DP: clip={dp.clip}, sigma={sigma:.4g}, delta={delta:.3g}, "
            f"q<={q_max:.3g}"
        )

    def _setup_secure_agg(self):
        self.secure = None
        smc = self.config.secure_agg
        if smc is None:
            return
        codec = FixedCodec(scale=2.0 ** -smc.scale_bits, modulus=smc.modulus, max_abs=smc.max_abs)
        self.secure = SecureAggregator(codec, smc.parts_sent)

    def _setup_compression(self):
        self.compressors: Dict[int, Compressor] = {}
        comp = self.config.compression
        if comp is None:
            return
        for pos in range(self.task.n_clients):
            self.compressors[pos] = Compressor(
                comp.method,
                ratio=comp.ratio,
                rank=comp.rank,
                error_feedback=comp.error_feedback,
                damping=comp.damping,
                rescale=comp.rescale,
            )

    def _close(self, phase: Phase) -> None:
        phase.report(self.ledger.actors)
        self.ledger.close(phase)

    def run_round(self, round_index: int) -> RoundResult:
        ledger = self.ledger
        ledger.begin_round(round_index)
        participants = sample_clients(
            self.task.n_clients, self.algo.fraction, self.rng.derive(SAMPLE_STREAM, round_index)
        )
        model_bytes = dense_wire_bytes(self.n_params)

        phase = ledger.phase("broadcast")
        for pos in participants:
            t = transmit(self.channel, model_bytes)
            phase.charge(SERVER, TimeBucket.COMMUNICATE, t)
            phase.charge(self.actors[pos], TimeBucket.COMMUNICATE, t)
            ledger.log_bytes(SERVER, down=model_bytes)
            ledger.log_bytes(self.actors[pos], down=model_bytes)
        self._close(phase)

        updates, contributions, wire = self._local_phase(participants, round_index)

        report = None
        if self.secure is not None:
            report = self.secure.run(contributions, self.rng.derive(SHARE_STREAM, round_index))
            phase = ledger.phase("share-exchange")
            part_bytes = report.upload_bytes[0]
            for idx, pos in enumerate(participants):
                actor = self.actors[pos]
                units = report.encrypt_units[idx]
                phase.charge(actor, TimeBucket.ENCRYPT, self.cost.encrypt(units))
                for _ in range(self.secure.parts_sent):
                    phase.charge(actor, TimeBucket.COMMUNICATE, transmit(self.channel, part_bytes))
                ledger.log_bytes(actor, peer=report.share_bytes_sent[idx])
            self._close(phase)
            wire = list(report.upload_bytes)
            summed = report.aggregate
        else:
            summed = np.zeros(self.n_params)
            for contrib in contributions:
                summed = summed + contrib

        phase = ledger.phase("upload")
        for idx, pos in enumerate(participants):
            t = transmit(self.channel, wire[idx])
            phase.charge(self.actors[pos], TimeBucket.COMMUNICATE, t)
            phase.charge(SERVER, TimeBucket.COMMUNICATE, t)
            ledger.log_bytes(self.actors[pos], up=wire[idx])
            ledger.log_bytes(SERVER, up=wire[idx])
        self._close(phase)
        self.bytes_raw += len(participants) * model_bytes
        self.bytes_wire += sum(wire)

        phase = ledger.phase("aggregate")
        combine = self.cost.aggregate(self.n_params * len(participants))
        phase.charge(SERVER, TimeBucket.OTHER, combine)
        phase.charge(SERVER, TimeBucket.OTHER, self.cost.schedule(len(participants)))
        if report is not None:
            phase.charge(SERVER, TimeBucket.ENCRYPT, self.cost.encrypt(report.server_units))
        self.params, self.server_state = apply_aggregate(
            summed, self.algo.name, self.params, effective_steps(updates), self.server_state
        )
        watch = Stopwatch()
        with watch.running():
            metric = evaluate(self.spec, self.params, self.task.val, self.task.metric)
        phase.charge(
            SERVER,
            TimeBucket.TRAIN,
            self.cost.evaluate(len(self.task.val), self.n_params, watch.elapsed),
        )
        self._close(phase)

        lr, reduced, count = self.scheduler.step(metric)
        if reduced:
            logger.debug(f"round {round_index}: lr reduced to {lr:.3g} ({count} reductions)")
        self.server_state = replace(self.server_state, lr=lr)
        buckets = ledger.end_round()
        traffic_up = sum(wire)
        return RoundResult(
            round_index=round_index,
            participants=[self.task.client_ids[p] for p in participants],
            params=self.params,
            metric=metric,
            lr=lr,
            reduction_count=count,
            bytes_up=traffic_up,
            bytes_down=len(participants) * model_bytes,
            bytes_peer=sum(report.share_bytes_sent) if report is not None else 0,
            bucket_seconds=buckets,
            eps_spent=worst_epsilon(list(self.privacy_ledgers.values())),
        )

    def _local_phase(self, participants: List[int], round_index: int):
        """Train, sanitize, compress and weight every participant's update"""
        phase = self.ledger.phase("local")
        lr = self.scheduler.lr
        updates = []
        restored = []
        wire = []
        for pos in participants:
            cid = self.task.client_ids[pos]
            actor = self.actors[pos]
            watch = Stopwatch()
            with watch.running():
                update = local_train(
                    self.task.shards[pos],
                    self.spec,
                    self.params,
                    self.algo,
                    lr,
                    self.rng.derive(TRAIN_STREAM, cid, round_index),
                    client_id=cid,
                )
            phase.charge(
                actor,
                TimeBucket.TRAIN,
                self.cost.train(update.samples_processed, self.n_params, watch.elapsed),
            )
            self.samples_processed += update.samples_processed
            payload = update.payload

            if self.dp is not None:
                noisy = dp_sanitize(
                    payload, self.dp.clip, self.dp.sigma,
                    self.rng.derive(DP_STREAM, cid, round_index),
                )
                payload = payload.with_values(noisy)
                eps = self.privacy_ledgers[pos].record(self.q[pos], self.dp.sigma)
                self.privacy_rows.append({
                    "round": round_index,
                    "client": cid,
                    "q": self.q[pos],
                    "sigma": self.dp.sigma,
                    "epsilon": eps,
                })
                phase.charge(actor, TimeBucket.TRAIN, self.cost.sanitize(self.n_params))

            n_bytes = dense_wire_bytes(self.n_params)
            if pos in self.compressors:
                packed, payload = self.compressors[pos].compress(
                    payload, self.rng.derive(COMPRESS_STREAM, cid, round_index)
                )
                n_bytes = packed.wire_bytes
                phase.charge(actor, TimeBucket.TRAIN, self.cost.compress(self.n_params))
            phase.charge(actor, TimeBucket.OTHER, self.cost.serialize(n_bytes))

            update.payload = payload
            update.wire_bytes = n_bytes
            updates.append(update)
            restored.append(payload)
            wire.append(n_bytes)
        self._close(phase)

        total = sum(u.n_samples for u in updates)
        contributions = [
            client_weight(u, total, self.algo.name) * p.values for u, p in zip(updates, restored)
        ]
        return updates, contributions, wire

    def run(self, on_round: Optional[Callable[[RoundResult], None]] = None) -> ExperimentResult:
        cap = self.config.round_cap
        rounds: List[RoundResult] = []
        for r in range(1, cap + 1):
            result = self.run_round(r)
            rounds.append(result)
            if on_round is not None:
                on_round(result)
            if result.reduction_count >= self.algo.max_reductions:
                break
        return self._finish(rounds, cap)

    def _finish(self, rounds: List[RoundResult], cap: int) -> ExperimentResult:
        curve = [r.reduction_count for r in rounds]
        converged = curve[-1] >= self.algo.max_reductions
        overhead, throughput = overhead_and_throughput(self.ledger, self.samples_processed)
        final = evaluate(self.spec, self.params, self.task.test, self.task.metric)
        logger.info(
            f"seed {self.seed}: {len(rounds)} rounds, test {self.task.metric.value}={final:.4f}, "
            f"overhead={overhead:.3f}"
        )
        return ExperimentResult(
            rounds=rounds,
            params=self.params,
            final_metric=final,
            convergence_rounds=reported_rounds(curve, cap, self.algo.max_reductions),
            converged=converged,
            throughput=throughput,
            overhead=overhead,
            uplink_ratio=wire_ratio(self.bytes_raw, self.bytes_wire),
            downlink_ratio=1.0,
            eps_spent=worst_epsilon(list(self.privacy_ledgers.values())),
            samples_processed=self.samples_processed,
            ledger=self.ledger,
            privacy_rows=self.privacy_rows,
        )


def run_experiment(
    config: ExperimentConfig,
    task,
    seed: int,
    on_round: Optional[Callable[[RoundResult], None]] = None,
) -> ExperimentResult:
    """Run one seeded experiment; vertical tasks go through the split-learning trainer"""
    from core.splitnn import VerticalTask, run_split_experiment

    if isinstance(task, VerticalTask):
        return run_split_experiment(config, task, seed, on_round)
    return FederatedEngine(config, task, seed).run(on_round)
