"""Differentiable operations over :class:`Tensor`.

Spatial tensors use the ``(batch, time, frequency, channel)`` layout.
Every op computes its forward value with numpy and registers a backward
closure on the active tape.
"""
from __future__ import annotations

import builtins
from typing import Optional, Sequence

import numpy as np

from ..errors import ShapeError
from . import kernels
from .core import Tensor, as_tensor, make_result

KERNEL = 5
STRIDE = 2
# 'same' padding for a 5-tap stride-2 window over an even extent
PAD_BEFORE = 1
PAD_AFTER = 2


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach its shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a_shape, b_shape, op):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} do not broadcast") from None


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


# -- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "add")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "sub")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "mul")

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", a.data * b.data, (a, b), bw)


def broadcast(x, shape: Sequence[int]) -> Tensor:
    """Repeat ``x`` along axes of extent 1 (or missing leading axes) to ``shape``."""
    x = as_tensor(x)
    shape = tuple(shape)
    if len(shape) < x.ndim:
        raise ShapeError(f"broadcast: cannot reduce rank {x.ndim} to {len(shape)}")
    for have, want in zip(reversed(x.shape), reversed(shape)):
        if have != 1 and have != want:
            raise ShapeError(f"broadcast: extent {have} incompatible with {want} ({x.shape} -> {shape})")

    def bw(g):
        return (unbroadcast(g, x.shape),)

    return make_result("broadcast", np.broadcast_to(x.data, shape).copy(), (x,), bw)


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return make_result("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return make_result("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_result("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", y, (x,), bw)


# -- reductions and shape -----------------------------------------------------
def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result("sum", out, (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        if _fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result("getitem", np.asarray(x.data[index]), (x,), bw)


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return builtins.any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", out, tensors, bw)


# -- linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("matmul", a.data @ b.data, (a, b), bw)


def dense(x, weights, bias=None) -> Tensor:
    out = matmul(x, weights)
    return out if bias is None else add(out, bias)


# -- convolutions ---------------------------------------------------------------
def _conv_geometry(shape, op):
    if len(shape) != 4:
        raise ShapeError(f"{op}: expected a (batch, time, freq, channel) tensor, got {shape}")
    _, w, h, _ = shape
    if w % 2 or h % 2:
        raise ShapeError(f"{op}: spatial extents must be even, got {w}x{h}")


def _conv_forward(x: np.ndarray, k: np.ndarray):
    nb, w, h, cin = x.shape
    wo, ho = w // 2, h // 2
    xp = np.pad(x, ((0, 0), (PAD_BEFORE, PAD_AFTER), (PAD_BEFORE, PAD_AFTER), (0, 0)))
    cols = kernels.im2col(np.ascontiguousarray(xp), KERNEL, STRIDE, wo, ho)
    flat = cols.reshape(nb * wo * ho, -1)
    out = flat @ k.reshape(-1, k.shape[-1])
    return out.reshape(nb, wo, ho, -1), flat


def _conv_input_grad(g: np.ndarray, k: np.ndarray, in_shape) -> np.ndarray:
    nb, w, h, cin = in_shape
    _, wo, ho, cout = g.shape
    dcols = g.reshape(-1, cout) @ k.reshape(-1, cout).T
    dcols = np.ascontiguousarray(dcols.reshape(nb, wo, ho, KERNEL, KERNEL, cin))
    dxp = kernels.col2im(dcols, w + PAD_BEFORE + PAD_AFTER, h + PAD_BEFORE + PAD_AFTER, STRIDE)
    return dxp[:, PAD_BEFORE : PAD_BEFORE + w, PAD_BEFORE : PAD_BEFORE + h]


def _check_kernel(x_shape, k_shape, cin_axis, op):
    if len(k_shape) != 4 or k_shape[:2] != (KERNEL, KERNEL):
        raise ShapeError(f"{op}: kernel must be {KERNEL}x{KERNEL}xCinxCout, got {k_shape}")
    if k_shape[cin_axis] != x_shape[-1]:
        raise ShapeError(
            f"{op}: input has {x_shape[-1]} channels, kernel {k_shape} expects {k_shape[cin_axis]}"
        )


def conv2d(x, kernel, bias=None) -> Tensor:
    """5x5 convolution, stride 2, 'same' padding; halves time and frequency.

    ``kernel`` has shape ``(5, 5, Cin, Cout)``.
    """
    x, kernel = _pair(x, kernel)
    _conv_geometry(x.shape, "conv2d")
    _check_kernel(x.shape, kernel.shape, 2, "conv2d")
    out, flat = _conv_forward(x.data, kernel.data)

    def bw(g):
        gk = (flat.T @ g.reshape(-1, g.shape[-1])).reshape(kernel.shape) if kernel.requires_grad else None
        gx = _conv_input_grad(g, kernel.data, x.shape) if x.requires_grad else None
        return gx, gk

    y = make_result("conv2d", out, (x, kernel), bw)
    return y if bias is None else add(y, bias)


def conv2d_transpose(x, kernel, bias=None) -> Tensor:
    """Adjoint of :func:`conv2d`; doubles time and frequency.

    ``kernel`` has shape ``(5, 5, Cout, Cin)`` where ``Cin`` is the channel
    count of ``x``, i.e. the kernel of the convolution being transposed.
    """
    x, kernel = _pair(x, kernel)
    if x.ndim != 4:
        raise ShapeError(f"conv2d_transpose: expected a 4-d tensor, got {x.shape}")
    _check_kernel(x.shape, kernel.shape, 3, "conv2d_transpose")
    nb, w, h, _ = x.shape
    out_shape = (nb, 2 * w, 2 * h, kernel.shape[2])
    out = _conv_input_grad(x.data, kernel.data, out_shape)

    def bw(g):
        gx = gk = None
        gconv, flat = _conv_forward(g, kernel.data)
        if x.requires_grad:
            gx = gconv
        if kernel.requires_grad:
            gk = (flat.T @ x.data.reshape(-1, x.shape[-1])).reshape(kernel.shape)
        return gx, gk

    y = make_result("conv2d_transpose", np.ascontiguousarray(out), (x, kernel), bw)
    return y if bias is None else add(y, bias)


# -- normalisation and regularisation -----------------------------------------
def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.99,
    eps: float = 1e-5,
) -> Tensor:
    """Normalise over every axis but the last (channel) axis.

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    x, gamma = _pair(x, gamma)
    beta = as_tensor(beta, dtype=x.dtype)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * inv
    out = (gamma.data * xhat + beta.data).astype(x.dtype)
    count = x.size // c

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = inv / count * (
                    count * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes)
                )
            else:
                gx = gxhat * inv
            gx = gx.astype(x.dtype)
        return gx, gg, gb

    return make_result("batch_norm", out, (x, gamma, beta), bw)


def dropout(x, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: surviving activations are scaled by ``1/(1-rate)``."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    rng = rng if rng is not None else np.random.default_rng()
    mask = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.dtype)
    return make_result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# -- pooling ----------------------------------------------------------------
def autopool(x, alpha) -> Tensor:
    """Soft-max weighted pooling over the time axis (second to last).

    ``out[p] = sum_n x[n, p] * softmax_n(alpha[p] * x[:, p])``. ``alpha = 0``
    gives mean pooling, large ``alpha`` approaches max pooling.
    """
    x, alpha = _pair(x, alpha)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ShapeError(f"autopool: need a non-empty time axis, got {x.shape}")
    if alpha.shape != (x.shape[-1],):
        raise ShapeError(f"autopool: alpha must have shape ({x.shape[-1]},), got {alpha.shape}")
    s = alpha.data * x.data
    e = np.exp(s - s.max(axis=-2, keepdims=True))
    w = e / e.sum(axis=-2, keepdims=True)
    out = (x.data * w).sum(axis=-2)

    def bw(g):
        g = np.expand_dims(g, -2)
        centred = x.data - np.expand_dims(out, -2)
        gx = g * w * (1.0 + alpha.data * centred) if x.requires_grad else None
        ga = None
        if alpha.requires_grad:
            ga = unbroadcast((g * w * x.data * centred).sum(axis=-2), alpha.shape)
        return gx, ga

    return make_result("autopool", out, (x, alpha), bw)


# -- losses -------------------------------------------------------------------
def mean_abs_error(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mean_abs_error: shapes {a.shape} and {b.shape} differ")
    return mean(abs(sub(a, b)))
