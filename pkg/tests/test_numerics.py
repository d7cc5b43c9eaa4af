"""
Tests for the tensor, tape and operation layer.
"""

import math

import numpy as np
import pytest

from dcmnet.errors import NonFiniteError, ShapeError, TapeError
from dcmnet.numerics import (
    SGD,
    Adam,
    ConvLayer,
    LinearLayer,
    Tape,
    Tensor,
    activation,
    add,
    conv2d,
    conv3d,
    conv_output_size,
    elementwise,
    finite_diff_grad,
    linear,
    matmul,
    mul,
    relative_error,
    rng_stream,
    softmax,
    total,
)


def _grad_of(build, x: np.ndarray) -> np.ndarray:
    """Analytic gradient of total(build(x)) with respect to x."""
    tape = Tape()
    param = Tensor(x, requires_grad=True)
    tape.backward(total(build(param, tape), tape))
    return param.grad


def _numeric_grad(build, x: np.ndarray) -> np.ndarray:
    return finite_diff_grad(lambda t: total(build(t, None)), x, h=1e-5).data


def _naive_conv2d(x, w, b):
    c_out, _, kh, kw = w.shape
    _, h, width = x.shape
    out = np.zeros((c_out, h - kh + 1, width - kw + 1))
    for o in range(c_out):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                out[o, i, j] = np.sum(x[:, i : i + kh, j : j + kw] * w[o]) + b[o]
    return out


def _naive_conv3d(x, w, b):
    c_out, _, kd, kh, kw = w.shape
    _, depth, h, width = x.shape
    out = np.zeros((c_out, depth - kd + 1, h - kh + 1, width - kw + 1))
    for o in range(c_out):
        for z in range(out.shape[1]):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    window = x[:, z : z + kd, i : i + kh, j : j + kw]
                    out[o, z, i, j] = np.sum(window * w[o]) + b[o]
    return out


class TestTensor:
    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, float("nan")])

    def test_rejects_zero_extent(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_data_is_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_assign_checks_shape(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ShapeError):
            t.assign([1.0, 2.0, 3.0])


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(a)).data, a)

    def test_permutation(self):
        out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0, 1], [1, 0]]))
        np.testing.assert_array_equal(out.data, [[2, 1], [4, 3]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 5)), Tensor(rng.normal(size=(5, 2)))

        def build(x, tape):
            return matmul(x, b, tape)

        assert relative_error(_grad_of(build, a), _numeric_grad(build, a)) <= 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        np.testing.assert_allclose(softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-12)

    def test_matches_direct_evaluation(self):
        expected = [math.exp(v) / sum(math.exp(u) for u in (1, 2, 3)) for v in (1, 2, 3)]
        np.testing.assert_allclose(softmax(Tensor([1.0, 2.0, 3.0])).data, expected, rtol=1e-14)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(2).normal(scale=20, size=(6, 7))
        np.testing.assert_allclose(softmax(Tensor(x), axis=0).data.sum(axis=0), 1.0, atol=1e-6)

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            softmax(Tensor([1.0, 2.0]), axis=1)


class TestElementwise:
    def test_identities(self):
        a = np.random.default_rng(3).normal(size=(2, 3))
        np.testing.assert_array_equal(mul(Tensor(a), Tensor(np.ones_like(a))).data, a)
        np.testing.assert_array_equal(add(Tensor(a), Tensor(np.zeros_like(a))).data, a)

    def test_mul_gradient(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(3, 4)), Tensor(rng.normal(size=(3, 4)))

        def build(x, tape):
            return mul(x, b, tape)

        assert relative_error(_grad_of(build, a), _numeric_grad(build, a)) <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.ones(3)), Tensor(np.ones(4)))


class TestConvolution:
    def test_lidar_first_layer_shape(self):
        layer = ConvLayer(Tensor(np.zeros((64, 1, 3, 3))), Tensor(np.zeros(64)))
        assert conv2d(Tensor(np.ones((1, 11, 11))), layer).shape == (64, 9, 9)

    def test_hsi_layer_shapes(self):
        first = ConvLayer(Tensor(np.zeros((8, 1, 9, 3, 3))), Tensor(np.zeros(8)))
        second = ConvLayer(Tensor(np.zeros((16, 8, 7, 3, 3))), Tensor(np.zeros(16)))
        x = conv3d(Tensor(np.ones((1, 30, 11, 11))), first)
        assert x.shape == (8, 22, 9, 9)
        assert conv3d(x, second).shape == (16, 16, 7, 7)

    def test_conv2d_matches_naive_loop(self):
        rng = np.random.default_rng(5)
        x, w, b = rng.normal(size=(4, 16, 16)), rng.normal(size=(3, 4, 3, 3)), rng.normal(size=3)
        out = conv2d(Tensor(x), ConvLayer(Tensor(w), Tensor(b)))
        np.testing.assert_allclose(out.data, _naive_conv2d(x, w, b), rtol=0, atol=1e-12)

    def test_conv3d_matches_naive_loop(self):
        rng = np.random.default_rng(6)
        x, w, b = rng.normal(size=(2, 8, 8, 8)), rng.normal(size=(2, 2, 3, 3, 3)), rng.normal(size=2)
        out = conv3d(Tensor(x), ConvLayer(Tensor(w), Tensor(b)))
        np.testing.assert_allclose(out.data, _naive_conv3d(x, w, b), rtol=0, atol=1e-12)

    def test_batched_equals_per_sample(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 2, 6, 6))
        layer = ConvLayer(Tensor(rng.normal(size=(4, 2, 3, 3))), Tensor(rng.normal(size=4)), padding=1)
        batched = conv2d(Tensor(x), layer).data
        for n in range(3):
            np.testing.assert_array_equal(batched[n], conv2d(Tensor(x[n]), layer).data)

    def test_padding_preserves_extent(self):
        layer = ConvLayer(Tensor(np.zeros((2, 2, 3, 3))), Tensor(np.zeros(2)), padding=1)
        assert conv2d(Tensor(np.ones((2, 3, 3))), layer).shape == (2, 3, 3)

    def test_non_integral_extent(self):
        with pytest.raises(ShapeError):
            conv_output_size(6, 3, 2, 0)

    def test_kernel_too_large(self):
        layer = ConvLayer(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros(1)))
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 4, 4))), layer)

    @pytest.mark.parametrize("padding", [0, 1])
    def test_conv2d_gradients(self, padding):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 5, 5))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        weights = rng.normal(size=(3, 5 - 2 + 2 * padding, 5 - 2 + 2 * padding))

        def build(t, tape):
            return mul(conv2d(t, ConvLayer(w, b, padding=padding), tape), Tensor(weights), tape)

        assert relative_error(_grad_of(build, x), _numeric_grad(build, x)) <= 1e-6

        w.zero_grad()
        tape = Tape()
        tape.backward(total(build(Tensor(x), tape), tape))

        def loss_w(t):
            return total(mul(conv2d(Tensor(x), ConvLayer(t, b, padding=padding)), Tensor(weights)))

        numeric_w = finite_diff_grad(loss_w, w).data
        assert relative_error(w.grad, numeric_w) <= 1e-6

    def test_conv3d_input_gradient(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 5, 4, 4))
        layer = ConvLayer(Tensor(rng.normal(size=(2, 1, 3, 2, 2))), Tensor(rng.normal(size=2)))

        def build(t, tape):
            return activation(conv3d(t, layer, tape), "tanh", tape)

        assert relative_error(_grad_of(build, x), _numeric_grad(build, x)) <= 1e-6


class TestActivation:
    def test_restricted_tanh_saturation(self):
        assert activation(Tensor([5.0]), "restricted_tanh").item() == pytest.approx(0.999909, abs=1e-6)

    def test_restricted_tanh_never_reaches_one(self):
        assert activation(Tensor([50.0]), "restricted_tanh").item() < 1.0

    def test_restricted_tanh_is_zero_for_non_positive(self):
        out = activation(Tensor(np.linspace(-10, 0, 101)), "restricted_tanh").data
        assert (out == 0).all()

    def test_restricted_tanh_is_monotone_and_bounded(self):
        grid = np.sort(np.concatenate([np.linspace(-50, 50, 10_001), [0.0, 1e-300, 40.0, 1e300]]))
        out = activation(Tensor(grid), "restricted_tanh").data
        assert (np.diff(out) >= 0).all()
        assert ((out >= 0.0) & (out < 1.0)).all()

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            activation(Tensor([1.0]), "gelu")


class TestLinear:
    def test_gradient_random_layer(self):
        rng = np.random.default_rng(10)
        layer = LinearLayer(Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=4)))
        x = rng.normal(size=8)

        def build(t, tape):
            return activation(linear(t, layer, tape), "tanh", tape)

        assert relative_error(_grad_of(build, x), _numeric_grad(build, x)) <= 1e-6


class TestTape:
    def test_backward_needs_scalar(self):
        tape = Tape()
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = mul(x, x, tape)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_backward_on_empty_tape(self):
        with pytest.raises(TapeError):
            Tape().backward(Tensor(1.0))

    def test_gradients_accumulate_over_shared_inputs(self):
        tape = Tape()
        x = Tensor([3.0], requires_grad=True)
        loss = total(add(mul(x, x, tape), x, tape), tape)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_records_operation_names(self):
        tape = Tape()
        x = Tensor([1.0, 2.0], requires_grad=True)
        total(activation(x, "relu", tape), tape)
        assert tape.operations == ["relu", "total"]

    def test_composite_graph_matches_oracle(self):
        rng = np.random.default_rng(11)
        b = Tensor(rng.normal(size=(3, 4)))
        x = rng.normal(size=(2, 3))

        def build(t, tape):
            scores = softmax(matmul(t, b, tape), -1, tape)
            return mul(scores, activation(matmul(t, b, tape), "tanh", tape), tape)

        assert relative_error(_grad_of(build, x), _numeric_grad(build, x)) <= 1e-6


class TestOptimizers:
    def test_sgd_matches_closed_form_iterates(self):
        x = Tensor([2.0], requires_grad=True)
        optimizer = SGD([x], lr=0.1)
        for _ in range(5):
            tape = Tape()
            loss = total(mul(x, x, tape), tape)
            optimizer.zero_grad()
            tape.backward(loss)
            optimizer.step()
        # x <- x - lr * 2x
        assert x.item() == pytest.approx(2.0 * (1 - 0.2) ** 5, abs=1e-15)

    def test_adam_matches_hand_iterates(self):
        x = Tensor([2.0, -1.0], requires_grad=True)
        optimizer = Adam([x], lr=0.1)
        expected, m, v = np.array([2.0, -1.0]), np.zeros(2), np.zeros(2)
        for t in range(1, 4):
            tape = Tape()
            loss = total(mul(x, x, tape), tape)
            optimizer.zero_grad()
            tape.backward(loss)
            optimizer.step()
            g = 2 * expected
            m = 0.9 * m + (1 - 0.9) * g
            v = 0.999 * v + (1 - 0.999) * (g**2)
            expected = expected - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            np.testing.assert_allclose(x.data, expected, rtol=1e-14, atol=1e-15)

    def test_adam_first_step_is_lr_sized(self):
        x = Tensor([5.0, -0.001], requires_grad=True)
        optimizer = Adam([x], lr=0.01)
        tape = Tape()
        tape.backward(total(mul(x, x, tape), tape))
        optimizer.step()
        np.testing.assert_allclose(x.data, [5.0 - 0.01, -0.001 + 0.01], atol=1e-6)

    def test_adam_skips_parameters_without_gradient(self):
        x = Tensor([1.0], requires_grad=True)
        optimizer = Adam([x])
        optimizer.step()
        assert x.item() == 1.0

    def test_rng_streams_are_independent(self):
        a = rng_stream(0, "init").normal(size=4)
        b = rng_stream(0, "shuffle").normal(size=4)
        c = rng_stream(0, "init").normal(size=4)
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, c)


def _op_case(name: str, rng: np.random.Generator):
    """(build, input) for one differentiable op with random operands."""
    if name == "matmul":
        b = Tensor(rng.normal(size=(4, 3)))
        return (lambda t, tape: matmul(t, b, tape)), rng.normal(size=(2, 4))
    if name == "softmax":
        return (lambda t, tape: softmax(t, -1, tape)), rng.normal(scale=2.0, size=(3, 5))
    if name in ("add", "mul"):
        b = Tensor(rng.normal(size=(3, 4)))
        return (lambda t, tape: elementwise(t, b, name, tape)), rng.normal(size=(3, 4))
    if name in ("relu", "tanh", "restricted_tanh"):
        return (lambda t, tape: activation(t, name, tape)), rng.normal(size=(4, 3))
    if name == "linear":
        layer = LinearLayer(Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=3)))
        return (lambda t, tape: linear(t, layer, tape)), rng.normal(size=(2, 6))
    if name == "conv2d":
        layer = ConvLayer(Tensor(rng.normal(size=(2, 2, 3, 3))), Tensor(rng.normal(size=2)), padding=1)
        return (lambda t, tape: conv2d(t, layer, tape)), rng.normal(size=(2, 4, 4))
    layer = ConvLayer(Tensor(rng.normal(size=(2, 1, 3, 2, 2))), Tensor(rng.normal(size=2)))
    return (lambda t, tape: conv3d(t, layer, tape)), rng.normal(size=(1, 4, 3, 3))


OPS = ("matmul", "softmax", "add", "mul", "relu", "tanh", "restricted_tanh", "linear", "conv2d", "conv3d")


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", OPS)
def test_op_gradient_matches_central_differences(name, seed):
    rng = np.random.default_rng(1000 + seed)
    op, x = _op_case(name, rng)
    weights = Tensor(rng.normal(size=op(Tensor(x), None).shape))

    def build(t, tape):
        return mul(op(t, tape), weights, tape)

    assert relative_error(_grad_of(build, x), _numeric_grad(build, x)) <= 1e-4
