"""
DCMNet Numerics Module

Dense float64 tensors, an explicit reverse-mode tape, the differentiable operations the
network is assembled from, optimizers, and a central-difference gradient oracle.

A Tape is created for one forward pass, recorded into by every operation that receives it,
and consumed by ``backward``. Operations called without a tape just compute values.
"""

import math
import zlib
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError, TapeError

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]

ACTIVATIONS = ("relu", "tanh", "restricted_tanh")

# Largest float64 below 1; restricted tanh never reaches 1 even where tanh rounds to it.
_GATE_CEILING = float(np.nextafter(1.0, 0.0))


def _freeze(array: np.ndarray) -> np.ndarray:
    """Validate and lock an array before it becomes Tensor storage."""
    if any(extent <= 0 for extent in array.shape):
        raise ShapeError(f"tensor extents must be positive, got {array.shape}")
    if not np.isfinite(array).all():
        raise NonFiniteError(f"non-finite value in tensor of shape {array.shape}")
    array.setflags(write=False)
    return array


class Tensor:
    """N-dimensional float64 array that can take part in a gradient tape."""

    def __init__(self, data, requires_grad: bool = False):
        self._data = _freeze(np.array(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _from_array(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor._data = _freeze(np.asarray(array, dtype=np.float64))
        tensor.requires_grad = requires_grad
        tensor.grad = None
        return tensor

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self._data.reshape(-1)[0])

    def assign(self, data) -> None:
        """Replace the values in place (optimizer updates, gradient checks)."""
        array = np.array(data, dtype=np.float64)
        if array.shape != self.shape:
            raise ShapeError(f"cannot assign shape {array.shape} to tensor of shape {self.shape}")
        self._data = _freeze(array)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._from_array(np.zeros(tuple(shape)), False)


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor._from_array(np.ones(tuple(shape)), False)


@dataclass
class _Operation:
    name: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Ordered record of the differentiable operations of one forward pass."""

    def __init__(self):
        self._operations: list[_Operation] = []

    def __len__(self) -> int:
        return len(self._operations)

    @property
    def operations(self) -> list[str]:
        """Names of the recorded operations in execution order."""
        return [op.name for op in self._operations]

    def record(
        self,
        name: str,
        data: np.ndarray,
        inputs: Sequence[Tensor],
        backward: BackwardFn,
    ) -> Tensor:
        """
        Wrap a computed value and remember how to push gradients back to its inputs.

        Args:
            name: Operation name (kept for inspection)
            data: Forward result
            inputs: Tensors the result was computed from
            backward: Maps the output gradient to one gradient (or None) per input

        Returns:
            Output Tensor; it requires grad when any input does
        """
        inputs = tuple(inputs)
        requires_grad = any(t.requires_grad for t in inputs)
        output = Tensor._from_array(data, requires_grad)
        if requires_grad:
            self._operations.append(_Operation(name, output, inputs, backward))
        return output

    def clear(self) -> None:
        self._operations.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor, then clear."""
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._operations:
            raise TapeError("backward called on an empty tape")
        if not any(op.output is loss for op in self._operations):
            raise TapeError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        reached: dict[int, Tensor] = {id(loss): loss}
        for op in reversed(self._operations):
            upstream = grads.get(id(op.output))
            if upstream is None:
                continue
            for tensor, grad in zip(op.inputs, op.backward(upstream), strict=True):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
                    reached[key] = tensor

        for key, tensor in reached.items():
            grad = np.array(grads[key], dtype=np.float64).reshape(tensor.shape)
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad
        self.clear()


def backward(loss: Tensor, tape: Tape) -> None:
    """Run the reverse pass of ``tape`` from the scalar ``loss``."""
    tape.backward(loss)


def _emit(
    tape: Tape | None,
    name: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: BackwardFn,
) -> Tensor:
    if tape is None:
        return Tensor._from_array(data, False)
    return tape.record(name, data, inputs, backward_fn)


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _require_same_shape(a, b, "add")
    return _emit(tape, "add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _require_same_shape(a, b, "mul")
    a_data, b_data = a.data, b.data
    return _emit(tape, "mul", a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def elementwise(a: Tensor, b: Tensor, op: str, tape: Tape | None = None) -> Tensor:
    """Pointwise ``add`` or ``mul`` of two same-shape tensors."""
    if op == "add":
        return add(a, b, tape)
    if op == "mul":
        return mul(a, b, tape)
    raise ValueError(f"Unknown elementwise op: {op!r}")


def scale(x: Tensor, factor: "float | Tensor", tape: Tape | None = None) -> Tensor:
    """
    Multiply by a constant, or by a Tensor whose shape is a leading prefix of ``x.shape``.

    The Tensor form broadcasts over the trailing axes, so a per-sample weight of shape (N,)
    scales every entry of an (N, ...) batch.
    """
    x_data = x.data
    if not isinstance(factor, Tensor):
        factor = float(factor)
        return _emit(tape, "scale", x_data * factor, (x,), lambda g: (g * factor,))

    if x.shape[: factor.ndim] != factor.shape:
        raise ShapeError(f"scale: factor shape {factor.shape} is not a prefix of {x.shape}")
    expanded = factor.data.reshape(factor.shape + (1,) * (x.ndim - factor.ndim))
    factor_shape = factor.shape

    def _backward(g):
        return g * expanded, (g * x_data).reshape(factor_shape + (-1,)).sum(axis=-1)

    return _emit(tape, "scale", x_data * expanded, (x, factor), _backward)


def take(x: Tensor, index: int, tape: Tape | None = None) -> Tensor:
    """Select entry ``index`` along the last axis."""
    if not -x.shape[-1] <= index < x.shape[-1]:
        raise ShapeError(f"take: index {index} out of range for shape {x.shape}")
    shape = x.shape

    def _backward(g):
        grad = np.zeros(shape)
        grad[..., index] = g
        return (grad,)

    return _emit(tape, "take", x.data[..., index], (x,), _backward)


def reshape(x: Tensor, shape: Sequence[int], tape: Tape | None = None) -> Tensor:
    original = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {original} as {tuple(shape)}") from e
    return _emit(tape, "reshape", data, (x,), lambda g: (g.reshape(original),))


def transpose(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got {x.shape}")
    return _emit(
        tape, "transpose", np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def total(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    shape = x.shape
    return _emit(
        tape, "total", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Matrix product of [..., m, k] and [..., k, n] with identical leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a_data, b_data = a.data, b.data

    def _backward(g):
        return g @ np.swapaxes(b_data, -1, -2), np.swapaxes(a_data, -1, -2) @ g

    return _emit(tape, "matmul", a_data @ b_data, (a, b), _backward)


def softmax(x: Tensor, axis: int = -1, tape: Tape | None = None) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtracted before exponentiation)."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return _emit(tape, "softmax", probs, (x,), _backward)


def activation(x: Tensor, kind: str, tape: Tape | None = None) -> Tensor:
    """
    Pointwise nonlinearity.

    ``restricted_tanh`` is max(0, tanh(x)), the routing gate function; its output lies in [0, 1).
    """
    x_data = x.data
    if kind == "relu":
        out = np.maximum(x_data, 0.0)
        deriv = (x_data > 0).astype(np.float64)
    elif kind == "tanh":
        out = np.tanh(x_data)
        deriv = 1.0 - out * out
    elif kind == "restricted_tanh":
        t = np.tanh(x_data)
        out = np.minimum(np.maximum(t, 0.0), _GATE_CEILING)
        deriv = (1.0 - t * t) * (x_data > 0)
    else:
        raise ValueError(f"Unknown activation: {kind!r} (expected one of {ACTIVATIONS})")
    return _emit(tape, kind, out, (x,), lambda g: (g * deriv,))


@dataclass(frozen=True)
class LinearLayer:
    """Fully connected layer y = W x + b with W of shape (out, in)."""

    weight: Tensor
    bias: Tensor

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


def linear(x: Tensor, layer: LinearLayer, tape: Tape | None = None) -> Tensor:
    """Apply ``layer`` along the last axis of ``x`` (x may be [n] or [..., n])."""
    weight, bias = layer.weight, layer.bias
    if weight.ndim != 2 or bias.shape != (weight.shape[0],) or x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input {x.shape} does not fit weight {weight.shape} / bias {bias.shape}"
        )
    x_data, w_data = x.data, weight.data

    def _backward(g):
        g2 = g.reshape(-1, w_data.shape[0])
        x2 = x_data.reshape(-1, w_data.shape[1])
        return g @ w_data, g2.T @ x2, g2.sum(axis=0)

    return _emit(tape, "linear", x_data @ w_data.T + bias.data, (x, weight, bias), _backward)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvLayer:
    """Convolution weights (C_out, C_in, *kernel) with bias (C_out,), stride and zero padding."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> tuple[int, ...]:
        return self.weight.shape[2:]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output extent of a valid cross-correlation, or ShapeError when it is not integral."""
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} exceeds padded extent {size + 2 * padding}")
    if span % stride:
        raise ShapeError(
            f"non-integral output extent: ({size} + 2*{padding} - {kernel}) / {stride} + 1"
        )
    return span // stride + 1


def _convolve(x: Tensor, layer: ConvLayer, spatial_dims: int, tape: Tape | None, name: str):
    weight, bias = layer.weight, layer.bias
    stride, pad = layer.stride, layer.padding
    if weight.ndim != spatial_dims + 2:
        raise ShapeError(f"{name}: weight shape {weight.shape} is not {spatial_dims}-D")
    batched = x.ndim == spatial_dims + 2
    if not batched and x.ndim != spatial_dims + 1:
        raise ShapeError(f"{name}: input shape {x.shape} is not {spatial_dims}-D")
    data = x.data if batched else x.data[np.newaxis]
    c_out, c_in = weight.shape[:2]
    kernel = weight.shape[2:]
    if data.shape[1] != c_in:
        raise ShapeError(f"{name}: input {x.shape} has {data.shape[1]} channels, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"{name}: bias {bias.shape} does not match {c_out} output channels")

    spatial = data.shape[2:]
    try:
        out_sizes = [conv_output_size(s, k, stride, pad) for s, k in zip(spatial, kernel, strict=True)]
    except ShapeError as e:
        raise ShapeError(f"{name}: input {x.shape} with kernel {kernel}: {e}") from e

    padded = np.pad(data, [(0, 0), (0, 0)] + [(pad, pad)] * spatial_dims)
    spatial_axes = list(range(2, 2 + spatial_dims))
    kernel_axes = list(range(2 + spatial_dims, 2 + 2 * spatial_dims))
    windows = sliding_window_view(padded, kernel, axis=tuple(spatial_axes))
    windows = windows[(slice(None), slice(None)) + (slice(None, None, stride),) * spatial_dims]

    w_data = weight.data
    out = np.tensordot(windows, w_data, axes=([1] + kernel_axes, [1] + spatial_axes))
    out = np.moveaxis(out, -1, 1) + bias.data.reshape((1, c_out) + (1,) * spatial_dims)
    if not batched:
        out = out[0]
    need_input_grad = x.requires_grad

    def _backward(g):
        g = g if batched else g[np.newaxis]
        grad_w = np.tensordot(g, windows, axes=([0] + spatial_axes, [0] + spatial_axes))
        grad_b = g.sum(axis=(0, *spatial_axes))
        if not need_input_grad:
            return None, grad_w, grad_b
        grad_padded = np.zeros(padded.shape)
        for offset in np.ndindex(*kernel):
            tap = w_data[(slice(None), slice(None)) + offset]
            contrib = np.moveaxis(np.tensordot(g, tap, axes=([1], [0])), -1, 1)
            target = (slice(None), slice(None)) + tuple(
                slice(o, o + stride * (n - 1) + 1, stride)
                for o, n in zip(offset, out_sizes, strict=True)
            )
            grad_padded[target] += contrib
        crop = (slice(None), slice(None)) + tuple(slice(pad, pad + s) for s in spatial)
        grad_x = grad_padded[crop]
        return (grad_x if batched else grad_x[0]), grad_w, grad_b

    return _emit(tape, name, out, (x, weight, bias), _backward)


def conv2d(x: Tensor, layer: ConvLayer, tape: Tape | None = None) -> Tensor:
    """2-D cross-correlation of [C, H, W] or [N, C, H, W] input."""
    return _convolve(x, layer, 2, tape, "conv2d")


def conv3d(x: Tensor, layer: ConvLayer, tape: Tape | None = None) -> Tensor:
    """3-D cross-correlation of [C, D, H, W] or [N, C, D, H, W] input."""
    return _convolve(x, layer, 3, tape, "conv3d")


# ---------------------------------------------------------------------------
# Initialization and randomness
# ---------------------------------------------------------------------------


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose ("init", "shuffle", "augment", ...)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))]))


def init_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    """Trainable tensor drawn from U(-sqrt(1/fan_in), +sqrt(1/fan_in))."""
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class SGD:
    """Plain gradient descent."""

    def __init__(self, parameters: Iterable[Tensor], lr: float = 0.01):
        self.params = list(parameters)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            p.assign(p.data - self.lr * p.grad)


class Adam:
    """Adaptive moment estimation with bias-corrected first and second moments."""

    def __init__(
        self,
        parameters: Iterable[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(parameters)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (p.grad**2)
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p.assign(p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------


def _as_float(value) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


def finite_diff_grad(
    f: Callable[[Tensor], "Tensor | float"],
    x: "Tensor | np.ndarray",
    h: float = 1e-5,
) -> Tensor:
    """
    Central-difference gradient of a scalar function.

    Each entry is (f(x + h*e_i) - f(x - h*e_i)) / 2h. ``f`` must be pure and deterministic.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros(base.shape)
    for index in np.ndindex(base.shape):
        plus = base.copy()
        plus[index] += h
        minus = base.copy()
        minus[index] -= h
        grad[index] = (_as_float(f(Tensor(plus))) - _as_float(f(Tensor(minus)))) / (2 * h)
    return Tensor(grad)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest entrywise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
