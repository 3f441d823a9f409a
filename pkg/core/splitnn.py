"""
Split Learning
Vertical FL with per-party bottom networks up to the cut layer, a server-owned
top network over the concatenated cut activations, and exact gradient routing.
"""

from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.linalg import block_diag

from models import Activation, EvalMetric, ExperimentResult, OutputHead, RoundResult, TimeBucket
from core.config import ExperimentConfig
from core.data import Dataset
from core.mlp import (
    ForwardCache,
    MlpSpec,
    OptimizerState,
    ParamLayout,
    ParamVector,
    PlateauScheduler,
    ShapeError,
    backward_from_output,
    forward,
    init_params,
    input_gradient,
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
from core.stats import check_metric, metric_value, reported_rounds

INIT_STREAM = 20
BATCH_STREAM = 21
ACTIVATION_HEADER_BYTES = 8


@dataclass(frozen=True)
class SplitSpec:
    """Party bottom models (cut head) and the server's top model"""
    bottoms: Tuple[MlpSpec, ...]
    top: MlpSpec

    def __post_init__(self):
        object.__setattr__(self, "bottoms", tuple(self.bottoms))
        if not self.bottoms:
            raise ShapeError("split learning needs at least one party")
        for spec in self.bottoms:
            if spec.head != OutputHead.CUT:
                raise ShapeError("party models must end at the cut layer")
        if self.top.head == OutputHead.CUT:
            raise ShapeError("the server model needs an output head")
        if self.top.input_width != sum(self.cut_widths):
            raise ShapeError(
                f"server input width {self.top.input_width} != cut widths {self.cut_widths}"
            )

    @property
    def cut_widths(self) -> List[int]:
        return [b.output_width for b in self.bottoms]

    @property
    def input_widths(self) -> List[int]:
        return [b.input_width for b in self.bottoms]

    @classmethod
    def default(
        cls,
        party_widths: Sequence[int],
        n_outputs: int,
        head: OutputHead,
        activation: Activation = Activation.RELU,
    ) -> "SplitSpec":
        """Each party: input -> 2*input -> input//2 cut; server: concatenation -> outputs"""
        bottoms = tuple(
            MlpSpec((d, 2 * d, max(1, d // 2)), activation, OutputHead.CUT) for d in party_widths
        )
        cut = sum(b.output_width for b in bottoms)
        return cls(bottoms, MlpSpec((cut, n_outputs), activation, head))


@dataclass
class SplitCaches:
    """Per-party and server activations of one split forward pass"""
    party: List[ForwardCache]
    server: ForwardCache
    party_params: List[ParamVector]
    server_params: ParamVector


def split_forward(
    spec: SplitSpec,
    party_params: Sequence[ParamVector],
    party_batches: Sequence[np.ndarray],
    server_params: ParamVector,
) -> Tuple[np.ndarray, SplitCaches]:
    """Bottom passes to the cut, raw concatenation, then the server pass"""
    if len(party_params) != len(spec.bottoms) or len(party_batches) != len(spec.bottoms):
        raise ShapeError(f"expected {len(spec.bottoms)} parties")
    rows = {np.asarray(b).reshape(len(b), -1).shape[0] for b in party_batches}
    if len(rows) != 1:
        raise ShapeError(f"party batches are not row-aligned: {sorted(rows)}")

    cuts, caches = [], []
    for bottom, params, batch in zip(spec.bottoms, party_params, party_batches):
        out, cache = forward(bottom, params, batch)
        cuts.append(out)
        caches.append(cache)
    outputs, server_cache = forward(spec.top, server_params, np.concatenate(cuts, axis=1))
    return outputs, SplitCaches(caches, server_cache, list(party_params), server_params)


def split_backward(
    spec: SplitSpec, caches: SplitCaches, targets
) -> Tuple[ParamVector, List[ParamVector]]:
    """Server gradient, then each party's slice of the cut gradient sent back down"""
    server_grad, cut_grad = input_gradient(spec.top, caches.server_params, caches.server, targets)
    bounds = np.cumsum([0] + spec.cut_widths)
    party_grads = []
    for i, bottom in enumerate(spec.bottoms):
        grad, _ = backward_from_output(
            bottom, caches.party_params[i], caches.party[i], cut_grad[:, bounds[i]:bounds[i + 1]]
        )
        party_grads.append(grad)
    return server_grad, party_grads


def monolithic_equivalent(
    spec: SplitSpec, party_params: Sequence[ParamVector], server_params: ParamVector
) -> Tuple[MlpSpec, ParamVector]:
    """Single network with block-diagonal bottom layers computing the same function"""
    depths = {b.n_layers for b in spec.bottoms}
    activations = {b.activation for b in spec.bottoms} | {spec.top.activation}
    if len(depths) != 1 or len(activations) != 1:
        raise ShapeError("block-diagonal form needs equal bottom depths and one activation")
    depth = depths.pop()

    widths = [sum(b.widths[layer] for b in spec.bottoms) for layer in range(depth + 1)]
    widths += list(spec.top.widths[1:])
    mono = MlpSpec(tuple(widths), spec.top.activation, spec.top.head)
    layout = ParamLayout.from_spec(mono)
    params = ParamVector(np.zeros(layout.size), layout)
    for layer in range(depth):
        params.weight(layer)[...] = block_diag(*[p.weight(layer) for p in party_params])
        params.bias(layer)[...] = np.concatenate([p.bias(layer) for p in party_params])
    for layer in range(spec.top.n_layers):
        params.weight(depth + layer)[...] = server_params.weight(layer)
        params.bias(depth + layer)[...] = server_params.bias(layer)
    return mono, params


@dataclass
class VerticalTask:
    """Aligned train/val/test rows and which columns each party owns"""
    split: SplitSpec
    slices: List[slice]
    train: Dataset
    val: Dataset
    test: Dataset
    metric: EvalMetric

    def party_batches(self, ds: Dataset, rows=None) -> List[np.ndarray]:
        x = ds.features if rows is None else ds.features[rows]
        return [x[:, s] for s in self.slices]


def split_evaluate(
    task: VerticalTask, party_params: Sequence[ParamVector], server_params: ParamVector,
    ds: Dataset,
) -> float:
    check_metric(task.split.top, task.metric)
    outputs, _ = split_forward(task.split, party_params, task.party_batches(ds), server_params)
    return metric_value(outputs, ds.labels, task.metric)


def activation_bytes(rows: int, width: int) -> int:
    """Length-prefixed float32 matrix"""
    return ACTIVATION_HEADER_BYTES + 4 * rows * width


class SplitTrainer:
    """Epoch-per-round split learning with simulated cut-layer traffic"""

    def __init__(self, config: ExperimentConfig, task: VerticalTask, seed: int):
        self.config = config
        self.task = task
        self.seed = seed
        self.algo = config.algorithm
        self.rng = SeededRng(seed)
        spec = task.split
        self.party_params = [
            init_params(b, self.rng.derive(INIT_STREAM, i)) for i, b in enumerate(spec.bottoms)
        ]
        self.server_params = init_params(spec.top, self.rng.derive(INIT_STREAM, len(spec.bottoms)))
        base = OptimizerState(
            kind=self.algo.optimizer, lr=self.algo.lr, momentum=self.algo.momentum
        )
        self.party_opt = [base.fresh() for _ in spec.bottoms]
        self.server_opt = base.fresh()
        self.scheduler = PlateauScheduler(
            lr=self.algo.lr,
            factor=self.algo.factor,
            patience=self.algo.patience,
            higher_is_better=task.metric.higher_is_better,
        )
        self.actors = [client_actor(i) for i in range(len(spec.bottoms))]
        self.ledger = TimeLedger([SERVER] + self.actors)
        self.channel = Channel.from_mbps(config.channel.bandwidth_mbps, config.channel.latency_ms)
        self.cost = CostModel(
            train_per_sample_param=config.cost.train_per_sample_param,
            eval_per_sample_param=config.cost.eval_per_sample_param,
            wall_clock=config.cost.wall_clock,
        )
        self.party_sizes = [param_count(b) for b in spec.bottoms]
        self.server_size = param_count(spec.top)
        self.samples_processed = 0

    def _close(self, phase: Phase) -> None:
        phase.report(self.ledger.actors)
        self.ledger.close(phase)

    def _step(self, rows: np.ndarray) -> Tuple[int, int]:
        """One aligned mini-batch; returns (bytes up, bytes down)"""
        spec, ledger, n = self.task.split, self.ledger, rows.size
        up = down = 0

        # Server broadcasts the shared row indices, parties run their bottoms
        phase = ledger.phase("bottom-forward")
        index_bytes = ACTIVATION_HEADER_BYTES + 8 * n
        batches = self.task.party_batches(self.task.train, rows)
        for i, actor in enumerate(self.actors):
            t = transmit(self.channel, index_bytes)
            phase.charge(SERVER, TimeBucket.COMMUNICATE, t)
            phase.charge(actor, TimeBucket.COMMUNICATE, t)
            phase.charge(actor, TimeBucket.TRAIN, 0.5 * self.cost.train(n, self.party_sizes[i]))
            cut_bytes = activation_bytes(n, spec.cut_widths[i])
            t = transmit(self.channel, cut_bytes)
            phase.charge(actor, TimeBucket.COMMUNICATE, t)
            phase.charge(SERVER, TimeBucket.COMMUNICATE, t)
            ledger.log_bytes(actor, up=cut_bytes, down=index_bytes)
            ledger.log_bytes(SERVER, up=cut_bytes, down=index_bytes)
            up += cut_bytes
            down += index_bytes
        self._close(phase)

        watch = Stopwatch()
        with watch.running():
            _, caches = split_forward(spec, self.party_params, batches, self.server_params)
            server_grad, party_grads = split_backward(spec, caches, self.task.train.labels[rows])
        phase = ledger.phase("top")
        phase.charge(SERVER, TimeBucket.TRAIN, self.cost.train(n, self.server_size, watch.elapsed))
        self._close(phase)

        phase = ledger.phase("bottom-backward")
        for i, actor in enumerate(self.actors):
            grad_bytes = activation_bytes(n, spec.cut_widths[i])
            t = transmit(self.channel, grad_bytes)
            phase.charge(SERVER, TimeBucket.COMMUNICATE, t)
            phase.charge(actor, TimeBucket.COMMUNICATE, t)
            phase.charge(actor, TimeBucket.TRAIN, 0.5 * self.cost.train(n, self.party_sizes[i]))
            ledger.log_bytes(actor, down=grad_bytes)
            ledger.log_bytes(SERVER, down=grad_bytes)
            down += grad_bytes
        self._close(phase)

        self.server_params, self.server_opt = optimizer_step(
            self.server_opt, self.server_params, server_grad
        )
        for i, grad in enumerate(party_grads):
            self.party_params[i], self.party_opt[i] = optimizer_step(
                self.party_opt[i], self.party_params[i], grad
            )
        self.samples_processed += n
        return up, down

    def run_round(self, round_index: int) -> RoundResult:
        ledger = self.ledger
        ledger.begin_round(round_index)
        n = len(self.task.train)
        batch = n if self.algo.batch_size <= 0 else min(self.algo.batch_size, n)
        order = self.rng.derive(BATCH_STREAM, round_index).permutation(n)
        up = down = 0
        for start in range(0, n, batch):
            b_up, b_down = self._step(order[start:start + batch])
            up += b_up
            down += b_down

        phase = ledger.phase("evaluate")
        watch = Stopwatch()
        with watch.running():
            metric = split_evaluate(self.task, self.party_params, self.server_params, self.task.val)
        total_params = self.server_size + sum(self.party_sizes)
        phase.charge(
            SERVER,
            TimeBucket.TRAIN,
            self.cost.evaluate(len(self.task.val), total_params, watch.elapsed),
        )
        self._close(phase)

        lr, reduced, count = self.scheduler.step(metric)
        if reduced:
            logger.debug(f"epoch {round_index}: lr reduced to {lr:.3g}")
        self.server_opt = replace(self.server_opt, lr=lr)
        self.party_opt = [replace(opt, lr=lr) for opt in self.party_opt]
        return RoundResult(
            round_index=round_index,
            participants=list(range(len(self.actors))),
            params=self.server_params,
            metric=metric,
            lr=lr,
            reduction_count=count,
            bytes_up=up,
            bytes_down=down,
            bucket_seconds=ledger.end_round(),
        )

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
        curve = [r.reduction_count for r in rounds]
        overhead, throughput = overhead_and_throughput(self.ledger, self.samples_processed)
        final = split_evaluate(self.task, self.party_params, self.server_params, self.task.test)
        logger.info(
            f"seed {self.seed}: split learning over {len(self.actors)} parties, "
            f"{len(rounds)} epochs, test {self.task.metric.value}={final:.4f}"
        )
        return ExperimentResult(
            rounds=rounds,
            params=self.server_params,
            final_metric=final,
            convergence_rounds=reported_rounds(curve, cap, self.algo.max_reductions),
            converged=curve[-1] >= self.algo.max_reductions,
            throughput=throughput,
            overhead=overhead,
            samples_processed=self.samples_processed,
            ledger=self.ledger,
        )


def run_split_experiment(
    config: ExperimentConfig,
    task: VerticalTask,
    seed: int,
    on_round: Optional[Callable[[RoundResult], None]] = None,
) -> ExperimentResult:
    return SplitTrainer(config, task, seed).run(on_round)
