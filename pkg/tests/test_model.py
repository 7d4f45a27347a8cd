import numpy as np
import pytest

from mergelab.core import ParamVector
from mergelab.errors import DomainError, StructuralError
from mergelab.model import (
    ModelSpec,
    backward,
    batch_gradient,
    cross_entropy,
    forward,
    forward_batch,
    forward_traced,
    init_params,
)


from oracles import finite_difference_gradient, max_relative_error, reference_forward


def sample_inputs(rng, spec):
    params = init_params(spec, int(rng.integers(1 << 30)))
    noise = rng.normal(scale=0.5, size=params.size).astype(np.float32)
    params = ParamVector(params.values + noise, params.index)
    x = rng.normal(size=spec.input_dim).astype(np.float32)
    y = int(rng.integers(spec.num_classes))
    return params, x, y


class TestModelSpec:
    def test_param_count_formula(self):
        spec = ModelSpec((2, 3, 2))
        assert spec.param_count() == 2 * 3 + 3 + 3 * 2 + 2 == 17

    def test_invalid_specs_rejected(self):
        with pytest.raises(DomainError):
            ModelSpec((4,))
        with pytest.raises(DomainError):
            ModelSpec((4, 0, 2))
        with pytest.raises(DomainError):
            ModelSpec((4, 3, 2), "sigmoid")


class TestInitParams:
    def test_deterministic(self):
        spec = ModelSpec((2, 3, 2))
        a = init_params(spec, 99)
        b = init_params(spec, 99)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, init_params(spec, 100).values)

    def test_length_matches_spec(self):
        spec = ModelSpec((2, 3, 2))
        assert init_params(spec, 0).size == 17

    def test_biases_zero_weights_bounded(self):
        spec = ModelSpec((9, 4, 3))
        params = init_params(spec, 5)
        assert np.all(params.tensor("layer1.bias") == 0.0)
        assert np.all(params.tensor("layer2.bias") == 0.0)
        assert np.abs(params.tensor("layer1.weight")).max() <= 1 / 3
        assert np.abs(params.tensor("layer2.weight")).max() <= 1 / 2


class TestForward:
    def test_zero_params_zero_logits(self):
        spec = ModelSpec((3, 4, 2))
        params = ParamVector(np.zeros(spec.param_count(), dtype=np.float32), spec.param_index())
        out = forward(spec, params, np.ones(3, dtype=np.float32))
        assert np.array_equal(out.values, np.zeros(2, dtype=np.float32))

    def test_single_layer_identity(self):
        spec = ModelSpec((3, 3))
        values = np.concatenate([np.eye(3, dtype=np.float32).ravel(), np.zeros(3, dtype=np.float32)])
        params = ParamVector(values, spec.param_index())
        x = np.array([0.5, -1.0, 2.0], dtype=np.float32)
        assert np.array_equal(forward(spec, params, x).values, x)

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_matches_straight_line_reference(self, rng, activation):
        spec = ModelSpec((4, 5, 3), activation)
        for _ in range(10):
            params, x, _ = sample_inputs(rng, spec)
            got = forward(spec, params, x).values
            want = reference_forward(spec, params, x)
            assert np.allclose(got, want, atol=1e-5)

    def test_dimension_mismatch(self):
        spec = ModelSpec((3, 2))
        params = init_params(spec, 0)
        with pytest.raises(StructuralError):
            forward(spec, params, np.ones(4, dtype=np.float32))

    def test_batch_agrees_with_single(self, rng):
        spec = ModelSpec((4, 6, 3))
        params, _, _ = sample_inputs(rng, spec)
        xs = rng.normal(size=(8, 4)).astype(np.float32)
        batched = forward_batch(spec, params, xs)
        for i in range(8):
            assert np.allclose(batched[i], forward(spec, params, xs[i]).values, atol=1e-5)


class TestForwardTraced:
    def test_final_layer_matches_forward_exactly(self, rng):
        spec = ModelSpec((4, 5, 3))
        params, x, _ = sample_inputs(rng, spec)
        trace = forward_traced(spec, params, x, {spec.depth})
        assert np.array_equal(trace.per_layer[spec.depth].values, forward(spec, params, x).values)

    def test_zero_params_all_layers_zero(self):
        spec = ModelSpec((3, 4, 4, 2))
        params = ParamVector(np.zeros(spec.param_count(), dtype=np.float32), spec.param_index())
        trace = forward_traced(spec, params, np.ones(3, dtype=np.float32), {1, 2, 3})
        for vec in trace.per_layer.values():
            assert np.all(vec.values == 0.0)

    def test_requested_layers_only(self, rng):
        spec = ModelSpec((4, 5, 6, 3))
        params, x, _ = sample_inputs(rng, spec)
        trace = forward_traced(spec, params, x, [2])
        assert set(trace.per_layer) == {2}
        assert trace.per_layer[2].values.size == 6

    def test_layers_match_reference(self, rng):
        spec = ModelSpec((4, 5, 3))
        params, x, _ = sample_inputs(rng, spec)
        trace = forward_traced(spec, params, x, {1, 2})
        full = reference_forward(spec, params, x)
        assert np.allclose(trace.per_layer[2].values, full, atol=1e-5)
        one_layer = ModelSpec((4, 5), spec.activation)
        cut = spec.param_count() - (5 * 3 + 3)
        hidden_params = ParamVector(params.values[:cut], one_layer.param_index())
        hidden = reference_forward(one_layer, hidden_params, x)
        hidden = np.maximum(hidden, 0.0)  # reference net has no activation on its last layer
        assert np.allclose(trace.per_layer[1].values, hidden, atol=1e-5)

    def test_trace_consistency_through_remaining_layers(self, rng):
        spec = ModelSpec((4, 6, 5, 3))
        params, x, _ = sample_inputs(rng, spec)
        trace = forward_traced(spec, params, x, {2, 3})
        tail_spec = ModelSpec((5, 3), spec.activation)
        w3 = params.tensor("layer3.weight")
        b3 = params.tensor("layer3.bias")
        tail_values = np.concatenate([w3.ravel(), b3]).astype(np.float32)
        tail = ParamVector(tail_values, tail_spec.param_index())
        reproduced = forward(tail_spec, tail, trace.per_layer[2].values)
        assert np.allclose(reproduced.values, trace.per_layer[3].values, atol=1e-6)

    def test_layer_out_of_range(self, rng):
        spec = ModelSpec((4, 5, 3))
        params, x, _ = sample_inputs(rng, spec)
        with pytest.raises(DomainError):
            forward_traced(spec, params, x, {3})

    def test_hidden_permutation_leaves_logits_unchanged(self, rng):
        spec = ModelSpec((4, 6, 3))
        params, x, _ = sample_inputs(rng, spec)
        perm = rng.permutation(6)
        w1 = params.tensor("layer1.weight")[:, perm]
        b1 = params.tensor("layer1.bias")[perm]
        w2 = params.tensor("layer2.weight")[perm, :]
        b2 = params.tensor("layer2.bias")
        permuted = ParamVector(
            np.concatenate([w1.ravel(), b1, w2.ravel(), b2]).astype(np.float32),
            spec.param_index(),
        )
        original = forward(spec, params, x).values
        shuffled = forward(spec, permuted, x).values
        assert np.allclose(original, shuffled, atol=1e-6)


class TestBackward:
    def test_gradient_matches_central_differences(self, rng):
        spec = ModelSpec((2, 4, 3))
        params, x, y = sample_inputs(rng, spec)
        analytic = backward(spec, params, x, y).values.astype(np.float64)
        numeric = finite_difference_gradient(spec, params, x, y)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_uniform_logits_bias_gradient(self):
        spec = ModelSpec((3, 4, 4))
        params = ParamVector(np.zeros(spec.param_count(), dtype=np.float32), spec.param_index())
        grad = backward(spec, params, np.ones(3, dtype=np.float32), 2)
        expected = np.full(4, 0.25, dtype=np.float32)
        expected[2] -= 1.0
        assert np.allclose(grad.tensor("layer2.bias"), expected, atol=1e-7)

    def test_zero_input_zeroes_first_layer_weight_gradient(self, rng):
        spec = ModelSpec((3, 4, 2))
        params, _, y = sample_inputs(rng, spec)
        grad = backward(spec, params, np.zeros(3, dtype=np.float32), y)
        assert np.all(grad.tensor("layer1.weight") == 0.0)

    def test_label_out_of_range(self, rng):
        spec = ModelSpec((3, 4, 2))
        params, x, _ = sample_inputs(rng, spec)
        with pytest.raises(DomainError):
            backward(spec, params, x, 2)

    def test_batch_gradient_is_mean_of_samples(self, rng):
        spec = ModelSpec((3, 5, 2))
        params, _, _ = sample_inputs(rng, spec)
        xs = rng.normal(size=(4, 3)).astype(np.float32)
        ys = rng.integers(2, size=4)
        batch = batch_gradient(spec, params, xs, ys).values
        singles = np.mean(
            [backward(spec, params, xs[i], int(ys[i])).values for i in range(4)], axis=0
        )
        assert np.allclose(batch, singles, atol=1e-6)

    def test_loss_decreases_along_negative_gradient(self, rng):
        spec = ModelSpec((4, 6, 3))
        params, x, y = sample_inputs(rng, spec)
        grad = backward(spec, params, x, y)
        stepped = ParamVector(params.values - np.float32(0.05) * grad.values, params.index)
        before = cross_entropy(spec, params, x[None, :], np.array([y]))
        after = cross_entropy(spec, stepped, x[None, :], np.array([y]))
        assert after < before
