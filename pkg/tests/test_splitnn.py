import numpy as np
import pytest

from models import Activation, OutputHead, TimeBucket
from core.config import build_config
from core.fl_engine import run_experiment
from core.mlp import MlpSpec, ShapeError, backward, forward, init_params, loss
from core.netsim import SERVER
from core.numkit import SeededRng
from core.runner import build_task
from core.splitnn import (
    SplitSpec,
    VerticalTask,
    activation_bytes,
    monolithic_equivalent,
    split_backward,
    split_forward,
)
from tests.conftest import finite_difference, relative_error


def _setup(widths=(3, 2), head=OutputHead.SOFTMAX_CE, n_out=3, rows=7, seed=0):
    spec = SplitSpec.default(widths, n_out, head, Activation.TANH)
    rng = SeededRng(seed)
    party = [init_params(b, rng.derive(i)) for i, b in enumerate(spec.bottoms)]
    server = init_params(spec.top, rng.derive(99))
    batches = [rng.derive(50, i).normal(size=(rows, w)) for i, w in enumerate(widths)]
    if head == OutputHead.LINEAR_MSE:
        targets = rng.derive(60).normal(size=rows)
    else:
        targets = rng.derive(60).integers(0, n_out, size=rows)
    return spec, party, server, batches, targets


class TestSplitSpec:
    def test_default_shapes(self):
        spec = SplitSpec.default([4, 6], 3, OutputHead.SOFTMAX_CE)
        assert spec.bottoms[0].widths == (4, 8, 2)
        assert spec.bottoms[1].widths == (6, 12, 3)
        assert spec.cut_widths == [2, 3]
        assert spec.top.widths == (5, 3)
        assert spec.input_widths == [4, 6]

    def test_width_one_party(self):
        spec = SplitSpec.default([1, 3], 1, OutputHead.LINEAR_MSE)
        assert spec.cut_widths == [1, 1]

    def test_rejects_bad_layouts(self):
        cut = MlpSpec((2, 2), head=OutputHead.CUT)
        with pytest.raises(ShapeError):
            SplitSpec((), MlpSpec((2, 3)))
        with pytest.raises(ShapeError):
            SplitSpec((MlpSpec((2, 2)),), MlpSpec((2, 3)))
        with pytest.raises(ShapeError):
            SplitSpec((cut,), MlpSpec((2, 2), head=OutputHead.CUT))
        with pytest.raises(ShapeError):
            SplitSpec((cut, cut), MlpSpec((3, 3)))

    def test_activation_bytes(self):
        assert activation_bytes(10, 3) == 128


class TestForwardBackward:
    def test_rows_must_align(self):
        spec, party, server, batches, _ = _setup()
        with pytest.raises(ShapeError):
            split_forward(spec, party, [batches[0], batches[1][:-1]], server)

    def test_matches_block_diagonal_network(self):
        spec, party, server, batches, targets = _setup()
        mono_spec, mono_params = monolithic_equivalent(spec, party, server)
        x = np.concatenate(batches, axis=1)

        out_split, caches = split_forward(spec, party, batches, server)
        out_mono, mono_cache = forward(mono_spec, mono_params, x)
        np.testing.assert_allclose(out_split, out_mono, rtol=1e-12, atol=1e-14)

        server_grad, party_grads = split_backward(spec, caches, targets)
        mono_grad = backward(mono_spec, mono_params, mono_cache, targets)
        depth = spec.bottoms[0].n_layers
        for layer in range(depth):
            rows = np.cumsum([0] + [b.widths[layer] for b in spec.bottoms])
            cols = np.cumsum([0] + [b.widths[layer + 1] for b in spec.bottoms])
            for i, grad in enumerate(party_grads):
                block = mono_grad.weight(layer)[rows[i]:rows[i + 1], cols[i]:cols[i + 1]]
                np.testing.assert_allclose(grad.weight(layer), block, rtol=1e-10, atol=1e-14)
                np.testing.assert_allclose(
                    grad.bias(layer), mono_grad.bias(layer)[cols[i]:cols[i + 1]], atol=1e-14
                )
        np.testing.assert_allclose(server_grad.weight(0), mono_grad.weight(depth), atol=1e-14)

    def test_single_party_is_a_plain_mlp(self):
        spec, party, server, batches, _ = _setup(widths=(5,))
        mono_spec, mono_params = monolithic_equivalent(spec, party, server)
        assert mono_spec.widths == (5, 10, 2, 3)
        out_split, _ = split_forward(spec, party, batches, server)
        np.testing.assert_allclose(out_split, forward(mono_spec, mono_params, batches[0])[0])

    def test_mixed_activations_have_no_block_form(self):
        bottoms = (
            MlpSpec((2, 2), Activation.TANH, OutputHead.CUT),
            MlpSpec((2, 2), Activation.RELU, OutputHead.CUT),
        )
        spec = SplitSpec(bottoms, MlpSpec((4, 2), Activation.TANH))
        party = [init_params(b, 0) for b in bottoms]
        with pytest.raises(ShapeError):
            monolithic_equivalent(spec, party, init_params(spec.top, 0))

    @pytest.mark.parametrize("head", [OutputHead.SOFTMAX_CE, OutputHead.LINEAR_MSE])
    def test_party_gradients_match_finite_differences(self, head):
        n_out = 1 if head == OutputHead.LINEAR_MSE else 3
        spec, party, server, batches, targets = _setup(head=head, n_out=n_out)
        _, caches = split_forward(spec, party, batches, server)
        _, party_grads = split_backward(spec, caches, targets)

        for i in range(len(party)):
            def f(values, i=i):
                params = list(party)
                params[i] = party[i].with_values(values)
                out, _ = split_forward(spec, params, batches, server)
                return loss(spec.top, out, targets)

            numeric = finite_difference(f, party[i].values.copy())
            assert relative_error(party_grads[i].values, numeric) < 1e-4

    def test_zero_residual_gives_zero_gradients(self):
        spec, party, server, batches, _ = _setup(head=OutputHead.LINEAR_MSE, n_out=1)
        out, caches = split_forward(spec, party, batches, server)
        server_grad, party_grads = split_backward(spec, caches, out[:, 0])
        assert np.all(server_grad.values == 0)
        assert all(np.all(g.values == 0) for g in party_grads)

    def test_party_gradient_ignores_unused_peer_feature(self):
        spec, party, server, batches, targets = _setup(rows=9)
        party[1].weight(0)[0, :] = 0.0

        def grad_a(b_batch):
            _, caches = split_forward(spec, party, [batches[0], b_batch], server)
            return split_backward(spec, caches, targets)[1][0].values

        base = grad_a(batches[1])
        unused = batches[1].copy()
        unused[:, 0] += 5.0
        used = batches[1].copy()
        used[:, 1] += 5.0
        np.testing.assert_allclose(grad_a(unused), base, atol=1e-12)
        assert np.max(np.abs(grad_a(used) - base)) > 1e-6


class TestTrainer:
    def _config(self, preset, **algorithm):
        return build_config({
            "preset": preset,
            "workload": {"n_samples": 240},
            "algorithm": {"max_rounds": 2, **algorithm},
        })

    def test_short_splitnn_run(self):
        config = self._config("vertical-splitnn")
        task = build_task(config, 0)
        assert isinstance(task, VerticalTask)
        assert len(task.split.bottoms) == 2

        result = run_experiment(config, task, 0)
        assert len(result.rounds) == 2
        ledger = result.ledger
        ledger.check_conservation()
        assert ledger.actors == [SERVER, "client-0", "client-1"]
        assert result.rounds[0].bytes_up > 0
        assert result.rounds[0].bytes_down > result.rounds[0].bytes_up
        assert ledger.bucket_seconds("client-0", TimeBucket.TRAIN) > 0
        assert 0.0 <= result.final_metric <= 1.0

    def test_vertical_combined_has_one_party(self):
        config = self._config("vertical-baseline")
        task = build_task(config, 0)
        assert len(task.split.bottoms) == 1
        assert task.split.input_widths == [8]
        result = run_experiment(config, task, 0)
        assert result.ledger.actors == [SERVER, "client-0"]

    def test_deterministic(self):
        config = self._config("vertical-splitnn")
        a = run_experiment(config, build_task(config, 3), 3)
        b = run_experiment(config, build_task(config, 3), 3)
        np.testing.assert_array_equal(a.params.values, b.params.values)
        assert a.metric_curve == b.metric_curve


@pytest.mark.slow
def test_splitnn_close_to_pooled_features():
    scores = {}
    for preset in ("vertical-baseline", "vertical-splitnn"):
        config = build_config({"preset": preset})
        scores[preset] = np.mean(
            [run_experiment(config, build_task(config, s), s).final_metric for s in range(3)]
        )
    assert scores["vertical-splitnn"] >= scores["vertical-baseline"] - 0.02
