"""
Tiny Trainable Models
Dense MLP family with flat parameter vectors, optimizers and the plateau scheduler
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import expit

from models import Activation, OptimizerKind, OutputHead
from core.numkit import NumericError, SeededRng, check_finite


class ShapeError(ValueError):
    """Widths or shapes do not line up"""


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths, hidden activation and output head"""
    widths: Tuple[int, ...]
    activation: Activation = Activation.RELU
    head: OutputHead = OutputHead.SOFTMAX_CE

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ShapeError("an MLP needs at least one layer boundary")
        if any(w <= 0 for w in self.widths):
            raise ShapeError(f"layer widths must be positive, got {self.widths}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]


def default_hidden(input_width: int) -> List[int]:
    """Two hidden layers: twice the input, then half of it"""
    return [2 * input_width, max(1, input_width // 2)]


@dataclass(frozen=True)
class Segment:
    name: str
    layer: int
    kind: str  # "weight" or "bias"
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParamLayout:
    """Shape registry mapping flat-vector segments to layer weights and biases"""

    def __init__(self, segments: List[Segment]):
        self.segments = segments
        self._by_name = {s.name: s for s in segments}
        self.size = sum(s.size for s in segments)

    @classmethod
    def from_spec(cls, spec: MlpSpec) -> "ParamLayout":
        segments = []
        offset = 0
        for layer in range(spec.n_layers):
            fan_in, fan_out = spec.widths[layer], spec.widths[layer + 1]
            segments.append(Segment(f"W{layer}", layer, "weight", offset, (fan_in, fan_out)))
            offset += fan_in * fan_out
            segments.append(Segment(f"b{layer}", layer, "bias", offset, (fan_out,)))
            offset += fan_out
        return cls(segments)

    def __getitem__(self, name: str) -> Segment:
        return self._by_name[name]

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and self.segments == other.segments


class ParamVector:
    """Flat float64 parameters (or gradients) with their shape registry"""

    def __init__(self, values: np.ndarray, layout: ParamLayout):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size != layout.size:
            raise ShapeError(f"expected {layout.size} values, got shape {values.shape}")
        self.values = values
        self.layout = layout

    def __len__(self):
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        """Reshaped view of one segment"""
        seg = self.layout[name]
        return self.values[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    def weight(self, layer: int) -> np.ndarray:
        return self.segment(f"W{layer}")

    def bias(self, layer: int) -> np.ndarray:
        return self.segment(f"b{layer}")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def init_params(spec: MlpSpec, seed) -> ParamVector:
    """Fan-in scaled uniform weights, zero biases"""
    rng = seed if isinstance(seed, SeededRng) else SeededRng(int(seed))
    layout = ParamLayout.from_spec(spec)
    values = np.zeros(layout.size)
    for seg in layout.segments:
        if seg.kind == "weight":
            bound = 1.0 / np.sqrt(seg.shape[0])
            values[seg.offset:seg.offset + seg.size] = rng.uniform(-bound, bound, seg.size)
    return ParamVector(values, layout)


@dataclass
class ForwardCache:
    """Activations kept for the backward pass"""
    inputs: List[np.ndarray]  # input to each layer
    pre: List[np.ndarray]  # pre-activation of each layer
    outputs: np.ndarray


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind == Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind == Activation.RELU:
        return (z > 0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _head(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    if spec.head == OutputHead.SOFTMAX_CE:
        return _softmax(z)
    if spec.head == OutputHead.SIGMOID_BCE:
        return expit(z)
    if spec.head == OutputHead.CUT:
        return _activate(spec.activation, z)
    return z


def forward(spec: MlpSpec, params: ParamVector, batch) -> Tuple[np.ndarray, ForwardCache]:
    """Batch forward pass returning (outputs, cache)"""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != spec.input_width:
        raise ShapeError(f"batch width {x.shape[1]} != input width {spec.input_width}")
    if len(params) != ParamLayout.from_spec(spec).size:
        raise ShapeError("parameter vector does not match the layer layout")

    inputs, pre = [], []
    a = x
    for layer in range(spec.n_layers):
        inputs.append(a)
        z = a @ params.weight(layer) + params.bias(layer)
        pre.append(z)
        if layer < spec.n_layers - 1:
            a = _activate(spec.activation, z)
        else:
            a = _head(spec, z)
    return a, ForwardCache(inputs=inputs, pre=pre, outputs=a)


def _target_matrix(spec: MlpSpec, outputs: np.ndarray, targets) -> np.ndarray:
    t = np.asarray(targets)
    if spec.head == OutputHead.SOFTMAX_CE and (t.ndim == 1 or t.shape[1] == 1):
        labels = t.reshape(-1).astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= spec.output_width):
            raise ShapeError("class index out of range for softmax head")
        onehot = np.zeros_like(outputs)
        onehot[np.arange(labels.size), labels] = 1.0
        t = onehot
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1:
        t = t.reshape(-1, 1)
    if t.shape != outputs.shape:
        raise ShapeError(f"targets shape {t.shape} != outputs shape {outputs.shape}")
    return t


def loss(spec: MlpSpec, outputs: np.ndarray, targets) -> float:
    """Mean loss over the batch for the output head"""
    if spec.head == OutputHead.CUT:
        raise ShapeError("cut-layer models have no loss")
    t = _target_matrix(spec, outputs, targets)
    eps = 1e-12
    if spec.head == OutputHead.SOFTMAX_CE:
        per = -np.sum(t * np.log(outputs + eps), axis=1)
    elif spec.head == OutputHead.SIGMOID_BCE:
        per = -np.sum(t * np.log(outputs + eps) + (1 - t) * np.log(1 - outputs + eps), axis=1)
    else:
        per = 0.5 * np.sum((outputs - t) ** 2, axis=1)
    return float(per.mean())


def _backprop(
    spec: MlpSpec, params: ParamVector, cache: ForwardCache, delta: np.ndarray
) -> Tuple[ParamVector, np.ndarray]:
    """Propagate a pre-activation gradient of the last layer down to the input"""
    grad = params.zeros_like()
    for layer in reversed(range(spec.n_layers)):
        a_in = cache.inputs[layer]
        grad.weight(layer)[...] = a_in.T @ delta
        grad.bias(layer)[...] = delta.sum(axis=0)
        delta = delta @ params.weight(layer).T
        if layer > 0:
            delta = delta * _activate_grad(spec.activation, cache.pre[layer - 1])
    return grad, delta


def backward(spec: MlpSpec, params: ParamVector, cache: ForwardCache, targets) -> ParamVector:
    """Gradient of the mean batch loss with respect to params"""
    if spec.head == OutputHead.CUT:
        raise ShapeError("cut-layer models are trained through backward_from_output")
    outputs = cache.outputs
    t = _target_matrix(spec, outputs, targets)
    # Every supported head pairs with a loss whose output-layer delta is (y - t)
    delta = (outputs - t) / outputs.shape[0]
    grad, _ = _backprop(spec, params, cache, delta)
    return grad


def backward_from_output(
    spec: MlpSpec, params: ParamVector, cache: ForwardCache, grad_out: np.ndarray
) -> Tuple[ParamVector, np.ndarray]:
    """Back-propagate an upstream gradient on the outputs; returns (grad, input grad)"""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.outputs.shape:
        raise ShapeError(f"upstream gradient {grad_out.shape} != outputs {cache.outputs.shape}")
    z = cache.pre[-1]
    if spec.head == OutputHead.CUT:
        delta = grad_out * _activate_grad(spec.activation, z)
    elif spec.head == OutputHead.LINEAR_MSE:
        delta = grad_out
    elif spec.head == OutputHead.SIGMOID_BCE:
        y = cache.outputs
        delta = grad_out * y * (1 - y)
    else:
        y = cache.outputs
        delta = y * (grad_out - np.sum(grad_out * y, axis=1, keepdims=True))
    return _backprop(spec, params, cache, delta)


def input_gradient(
    spec: MlpSpec, params: ParamVector, cache: ForwardCache, targets
) -> Tuple[ParamVector, np.ndarray]:
    """Loss gradient plus the gradient with respect to the model input"""
    t = _target_matrix(spec, cache.outputs, targets)
    delta = (cache.outputs - t) / cache.outputs.shape[0]
    return _backprop(spec, params, cache, delta)


@dataclass
class OptimizerState:
    """Momentum-SGD or Adam state owned by one actor"""
    kind: OptimizerKind = OptimizerKind.SGD
    lr: float = 0.1
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buf1: Optional[np.ndarray] = None  # momentum or first moment
    buf2: Optional[np.ndarray] = None  # second moment

    def fresh(self, lr: Optional[float] = None) -> "OptimizerState":
        """Same hyperparameters, empty buffers"""
        return OptimizerState(
            kind=self.kind,
            lr=self.lr if lr is None else lr,
            momentum=self.momentum,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )


def optimizer_step(
    state: OptimizerState, params: ParamVector, grad: ParamVector
) -> Tuple[ParamVector, OptimizerState]:
    """Apply one optimizer update; returns new params and new state"""
    if len(grad) != len(params):
        raise ShapeError(f"gradient length {len(grad)} != params length {len(params)}")
    if not grad.is_finite():
        raise NumericError("gradient contains non-finite entries")

    g = grad.values
    step = state.step + 1
    if state.kind == OptimizerKind.SGD:
        buf = g.copy() if state.buf1 is None else state.momentum * state.buf1 + g
        new_values = params.values - state.lr * buf
        new_state = OptimizerState(
            kind=state.kind, lr=state.lr, momentum=state.momentum, beta1=state.beta1,
            beta2=state.beta2, eps=state.eps, step=step, buf1=buf, buf2=None,
        )
    else:
        m = np.zeros_like(g) if state.buf1 is None else state.buf1
        v = np.zeros_like(g) if state.buf2 is None else state.buf2
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** step)
        v_hat = v / (1 - state.beta2 ** step)
        new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_state = OptimizerState(
            kind=state.kind, lr=state.lr, momentum=state.momentum, beta1=state.beta1,
            beta2=state.beta2, eps=state.eps, step=step, buf1=m, buf2=v,
        )
    return params.with_values(new_values), new_state


@dataclass
class PlateauScheduler:
    """Reduce-on-plateau learning rate schedule; patience counts evaluation calls"""
    lr: float
    factor: float = 0.1
    patience: int = 10
    higher_is_better: bool = True
    threshold: float = 1e-6
    best: Optional[float] = None
    bad_calls: int = 0
    reduction_count: int = 0
    history: List[int] = field(default_factory=list)

    def step(self, metric: float) -> Tuple[float, bool, int]:
        """Feed one evaluation; returns (lr, reduced, reduction_count)"""
        check_finite(metric, "metric")
        metric = float(metric)
        if self.best is None or self._improved(metric):
            self.best = metric
            self.bad_calls = 0
        else:
            self.bad_calls += 1

        reduced = False
        if self.bad_calls >= self.patience:
            self.lr *= self.factor
            self.bad_calls = 0
            self.reduction_count += 1
            reduced = True
        self.history.append(self.reduction_count)
        return self.lr, reduced, self.reduction_count

    def _improved(self, metric: float) -> bool:
        if self.higher_is_better:
            return metric > self.best + self.threshold
        return metric < self.best - self.threshold


def plateau_step(sched: PlateauScheduler, metric: float) -> Tuple[float, bool, int]:
    return sched.step(metric)


def predict(spec: MlpSpec, params: ParamVector, features: np.ndarray) -> np.ndarray:
    outputs, _ = forward(spec, params, features)
    return outputs


def param_count(spec: MlpSpec) -> int:
    return ParamLayout.from_spec(spec).size
