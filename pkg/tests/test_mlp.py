import numpy as np
import pytest

from models import Activation, OptimizerKind, OutputHead
from core.data import synth_dataset
from core.mlp import (
    MlpSpec,
    OptimizerState,
    ParamLayout,
    PlateauScheduler,
    ShapeError,
    backward,
    backward_from_output,
    default_hidden,
    forward,
    init_params,
    input_gradient,
    loss,
    optimizer_step,
    param_count,
    plateau_step,
)
from core.numkit import NumericError, SeededRng
from tests.conftest import finite_difference, relative_error


def _targets(spec: MlpSpec, n: int, rng: SeededRng):
    if spec.head == OutputHead.SOFTMAX_CE:
        return rng.integers(0, spec.output_width, size=n)
    if spec.head == OutputHead.SIGMOID_BCE:
        return rng.integers(0, 2, size=(n, spec.output_width)).astype(float)
    return rng.normal(size=(n, spec.output_width))


class TestLayout:
    def test_sizes(self):
        spec = MlpSpec((4, 8, 3))
        layout = ParamLayout.from_spec(spec)
        assert layout.size == 4 * 8 + 8 + 8 * 3 + 3 == param_count(spec)
        assert layout["W1"].shape == (8, 3)
        assert layout["b0"].offset == 32

    def test_segment_views_write_through(self):
        spec = MlpSpec((2, 3))
        params = init_params(spec, 0)
        params.bias(0)[...] = 5.0
        assert np.all(params.values[-3:] == 5.0)

    def test_rejects_degenerate_widths(self):
        with pytest.raises(ShapeError):
            MlpSpec((4,))
        with pytest.raises(ShapeError):
            MlpSpec((4, 0, 2))

    def test_default_hidden(self):
        assert default_hidden(8) == [16, 4]
        assert default_hidden(1) == [2, 1]


class TestInit:
    def test_seeded_and_zero_bias(self):
        spec = MlpSpec((5, 7, 2))
        a, b = init_params(spec, 9), init_params(spec, 9)
        np.testing.assert_array_equal(a.values, b.values)
        assert not np.any(a.bias(0)) and not np.any(a.bias(1))
        assert np.max(np.abs(a.weight(0))) <= 1 / np.sqrt(5)


class TestForward:
    def test_softmax_rows_sum_to_one(self, tanh_spec, rng):
        out, cache = forward(tanh_spec, init_params(tanh_spec, 1), rng.normal(size=(10, 4)))
        np.testing.assert_allclose(out.sum(axis=1), 1.0)
        assert len(cache.inputs) == tanh_spec.n_layers

    def test_width_mismatch(self, tanh_spec):
        with pytest.raises(ShapeError):
            forward(tanh_spec, init_params(tanh_spec, 1), np.zeros((3, 5)))

    def test_cut_head_applies_hidden_activation(self):
        spec = MlpSpec((3, 2), Activation.RELU, OutputHead.CUT)
        params = init_params(spec, 0)
        out, _ = forward(spec, params, -np.ones((4, 3)) * 10)
        assert np.all(out >= 0)


class TestBackward:
    @pytest.mark.parametrize(
        "head,width",
        [(OutputHead.SOFTMAX_CE, 3), (OutputHead.SIGMOID_BCE, 2), (OutputHead.LINEAR_MSE, 2)],
    )
    def test_matches_finite_differences(self, head, width):
        rng = SeededRng(4)
        spec = MlpSpec((3, 5, width), Activation.TANH, head)
        params = init_params(spec, 2)
        x = rng.normal(size=(7, 3))
        t = _targets(spec, 7, rng)
        _, cache = forward(spec, params, x)
        analytic = backward(spec, params, cache, t).values

        def f(values):
            out, _ = forward(spec, params.with_values(values), x)
            return loss(spec, out, t)

        assert relative_error(analytic, finite_difference(f, params.values)) < 1e-6

    def test_input_gradient(self):
        rng = SeededRng(8)
        spec = MlpSpec((3, 4, 2), Activation.TANH, OutputHead.LINEAR_MSE)
        params = init_params(spec, 3)
        x = rng.normal(size=(5, 3))
        t = rng.normal(size=(5, 2))
        _, cache = forward(spec, params, x)
        grad, dx = input_gradient(spec, params, cache, t)
        np.testing.assert_allclose(grad.values, backward(spec, params, cache, t).values)

        def f(flat):
            out, _ = forward(spec, params, flat.reshape(5, 3))
            return loss(spec, out, t)

        assert relative_error(dx.reshape(-1), finite_difference(f, x.reshape(-1))) < 1e-6

    def test_upstream_gradient_through_cut(self):
        rng = SeededRng(6)
        spec = MlpSpec((3, 4, 2), Activation.TANH, OutputHead.CUT)
        params = init_params(spec, 5)
        x = rng.normal(size=(6, 3))
        upstream = rng.normal(size=(6, 2))
        _, cache = forward(spec, params, x)
        grad, _ = backward_from_output(spec, params, cache, upstream)

        def f(values):
            out, _ = forward(spec, params.with_values(values), x)
            return float(np.sum(out * upstream))

        assert relative_error(grad.values, finite_difference(f, params.values)) < 1e-6

    def test_duplicated_batch_keeps_mean_gradient(self, tanh_spec, rng):
        params = init_params(tanh_spec, 1)
        x = rng.normal(size=(6, 4))
        t = rng.integers(0, 3, size=6)
        _, cache = forward(tanh_spec, params, x)
        single = backward(tanh_spec, params, cache, t).values
        _, cache2 = forward(tanh_spec, params, np.repeat(x, 2, axis=0))
        doubled = backward(tanh_spec, params, cache2, np.repeat(t, 2)).values
        np.testing.assert_allclose(doubled, single, rtol=1e-12, atol=1e-15)

    def test_zero_residual_regression(self, rng):
        spec = MlpSpec((3, 5, 2), Activation.RELU, OutputHead.LINEAR_MSE)
        params = init_params(spec, 4)
        x = rng.normal(size=(8, 3))
        out, cache = forward(spec, params, x)
        grad = backward(spec, params, cache, out.copy())
        np.testing.assert_allclose(grad.values, 0.0, atol=1e-15)

    def test_cut_has_no_loss(self):
        spec = MlpSpec((3, 2), head=OutputHead.CUT)
        params = init_params(spec, 0)
        _, cache = forward(spec, params, np.zeros((1, 3)))
        with pytest.raises(ShapeError):
            backward(spec, params, cache, np.zeros((1, 2)))

    def test_class_index_out_of_range(self, tanh_spec):
        params = init_params(tanh_spec, 0)
        _, cache = forward(tanh_spec, params, np.zeros((2, 4)))
        with pytest.raises(ShapeError):
            backward(tanh_spec, params, cache, np.array([0, 3]))


class TestTraining:
    def test_full_batch_sgd_decreases_loss(self):
        ds = synth_dataset("blobs-classification", 120, 4, classes=3, noise=0.5, seed=2,
                           separation=2.0)
        spec = MlpSpec((4, 8, 3), Activation.TANH, OutputHead.SOFTMAX_CE)
        params = init_params(spec, 0)
        state = OptimizerState(lr=0.01, momentum=0.0)
        losses = []
        for _ in range(50):
            out, cache = forward(spec, params, ds.features)
            losses.append(loss(spec, out, ds.labels))
            params, state = optimizer_step(state, params, backward(spec, params, cache, ds.labels))
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]


class TestOptimizer:
    def _pair(self):
        spec = MlpSpec((2, 1), head=OutputHead.LINEAR_MSE)
        params = init_params(spec, 0)
        grad = params.with_values(np.array([1.0, -2.0, 0.5]))
        return params, grad

    def test_momentum_sgd(self):
        params, grad = self._pair()
        state = OptimizerState(lr=0.1, momentum=0.9)
        p1, state = optimizer_step(state, params, grad)
        np.testing.assert_allclose(p1.values, params.values - 0.1 * grad.values)
        p2, state = optimizer_step(state, p1, grad)
        np.testing.assert_allclose(p2.values, p1.values - 0.1 * 1.9 * grad.values)
        assert state.step == 2

    def test_adam_first_step_is_signed_lr(self):
        params, grad = self._pair()
        state = OptimizerState(kind=OptimizerKind.ADAM, lr=0.01)
        p1, _ = optimizer_step(state, params, grad)
        expected = params.values - 0.01 * np.sign(grad.values)
        np.testing.assert_allclose(p1.values, expected, atol=1e-8)

    def test_fresh_drops_buffers(self):
        params, grad = self._pair()
        _, state = optimizer_step(OptimizerState(lr=0.1), params, grad)
        fresh = state.fresh(lr=0.5)
        assert fresh.buf1 is None and fresh.step == 0 and fresh.lr == 0.5

    def test_non_finite_gradient(self):
        params, grad = self._pair()
        grad.values[0] = np.nan
        with pytest.raises(NumericError):
            optimizer_step(OptimizerState(), params, grad)


class TestPlateauScheduler:
    def test_reductions_every_patience_plus_one_calls(self):
        sched = PlateauScheduler(lr=0.1, factor=0.1, patience=10)
        for _ in range(41):
            sched.step(0.5)
        assert sched.history[9] == 0
        assert sched.history[10] == 1
        assert sched.history[20] == 2
        assert sched.history[40] == 4
        assert sched.lr == pytest.approx(1e-5)

    def test_improvement_resets_patience(self):
        sched = PlateauScheduler(lr=1.0, patience=3)
        for metric in (0.1, 0.1, 0.1, 0.2, 0.2, 0.2):
            plateau_step(sched, metric)
        assert sched.reduction_count == 0

    def test_lower_is_better(self):
        sched = PlateauScheduler(lr=1.0, patience=2, higher_is_better=False)
        for metric in (1.0, 0.9, 0.8):
            _, reduced, _ = sched.step(metric)
            assert not reduced
        sched.step(0.85)
        _, reduced, count = sched.step(0.85)
        assert reduced and count == 1
