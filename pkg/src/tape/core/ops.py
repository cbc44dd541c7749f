"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy and registers a backward rule
returning one gradient per input (``None`` for non-differentiable inputs).
Broadcasting is supported only where the architecture needs it: elementwise
binary ops reduce their gradients back to the input shapes.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .tensor import DTYPE, Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make_result(out, (a, b), bw, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), bw, "relu")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)

    def bw(g):
        return (g * sign,)

    return make_result(np.abs(x.data), (x,), bw, "abs")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        return (g * 0.5 / out,)

    return make_result(out, (x,), bw, "sqrt")


def square(x: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * g * x.data,)

    return make_result(x.data * x.data, (x,), bw, "square")


# --- reductions --------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=DTYPE), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# --- shape ops ---------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc

    def bw(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inverse),)

    return make_result(x.data.transpose(axes), (x,), bw, "transpose")


def take(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` along axis 0; ``index`` may have any shape."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return make_result(x.data[index], (x,), bw, "take")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# --- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with identical leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make_result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` along the last axis of ``x``."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise DimensionError(f"linear expects last dim {d_in}, got {x.shape}")
    if bias is not None and bias.shape != (d_out,):
        raise DimensionError(f"bias shape {bias.shape} != ({d_out},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out.reshape(lead + (d_out,)), parents, bw, "linear")


# --- normalisation -------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


def layernorm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layernorm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + shift.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_shift = g.sum(axis=lead)
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain, g_shift

    return make_result(out, (x, gain, shift), bw, "layernorm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit Euclidean length; norms below eps are clamped to eps."""
    raw = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(raw, eps)
    out = x.data / norm
    active = raw > eps

    def bw(g):
        # the clamped branch is a constant divisor, so only unclamped rows project out the radial part
        radial = np.where(active, (g * out).sum(axis=-1, keepdims=True), 0.0)
        return ((g - out * radial) / norm,)

    return make_result(out, (x,), bw, "l2_normalize")


# --- convolution ---------------------------------------------------------------

def _im2col(padded: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    c = padded.shape[0]
    cols = np.empty((c, k, k, out_h, out_w), dtype=DTYPE)
    for dy in range(k):
        for dx in range(k):
            cols[:, dy, dx] = padded[:, dy:dy + out_h, dx:dx + out_w]
    return cols.reshape(c * k * k, out_h * out_w)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int], k: int, out_h: int, out_w: int) -> np.ndarray:
    padded = np.zeros(shape, dtype=DTYPE)
    cols = cols.reshape(shape[0], k, k, out_h, out_w)
    for dy in range(k):
        for dx in range(k):
            padded[:, dy:dy + out_h, dx:dx + out_w] += cols[:, dy, dx]
    return padded


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 2-D cross-correlation of a ``[C_in, H, W]`` map via im2col."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] input and 4-d kernel, got {x.shape}, {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2:
        raise DimensionError("conv2d kernel must be square")
    if x.shape[0] != c_in:
        raise DimensionError(f"kernel expects {c_in} input channels, input has {x.shape[0]}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} != ({c_out},)")
    _, h, w = x.shape
    p = padding
    out_h, out_w = h + 2 * p - k + 1, w + 2 * p - k + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError("conv2d kernel larger than padded input")
    padded = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    cols = _im2col(padded, k, out_h, out_w)
    w2 = kernel.data.reshape(c_out, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]

    def bw(g):
        g2 = g.reshape(c_out, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape)
        gpad = _col2im(w2.T @ g2, padded.shape, k, out_h, out_w)
        gx = gpad[:, p:p + h, p:p + w]
        gb = g2.sum(axis=1) if bias is not None else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out.reshape(c_out, out_h, out_w), parents, bw, "conv2d")


# --- losses ----------------------------------------------------------------------

def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute deviation over all elements."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss shape mismatch {pred.shape} vs {target.shape}")
    return mean(abs(sub(pred, target)))
