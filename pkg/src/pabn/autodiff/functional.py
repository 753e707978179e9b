"""Differentiable primitives.

Each function takes :class:`Tensor` inputs, computes the forward pass with
numpy in the inputs' precision and attaches a closure producing the
vector-Jacobian product for every input.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_output

SIGNED_SQRT_DELTA = 1e-8


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# structural / elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting (used for bias terms)."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_output("add", out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    factor = float(factor)
    out = x.data * x.data.dtype.type(factor)

    def backward(g):
        return (g * g.dtype.type(factor),)

    return make_output("scale", out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))

    def backward(g):
        return (g.reshape(x.shape),)

    return make_output("reshape", out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return make_output("transpose", out, (x,), backward)


def take(x: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; repeated indices are allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("take expects a 1-d index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"take index out of range for axis 0 of extent {x.shape[0]}")
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_output("take", out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return make_output("concat", out, tensors, backward)


def total(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return make_output("total", out, (x,), backward)


def sum_over_axis(x: Tensor, axis: int) -> Tensor:
    """Sum reduction along one axis (the axis is dropped)."""
    axis = axis % x.ndim
    out = x.data.sum(axis=axis)

    def backward(g):
        return (np.ascontiguousarray(np.broadcast_to(np.expand_dims(g, axis), x.shape)),)

    return make_output("sum_over_axis", out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        return (g * mask,)

    return make_output("relu", out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)

    def backward(g):
        return (g * out * (1 - out),)

    return make_output("sigmoid", out, (x,), backward)


def signed_sqrt(x: Tensor) -> Tensor:
    """sign(x) * sqrt(|x|); the backward is damped near zero."""
    a = np.abs(x.data)
    out = np.sign(x.data) * np.sqrt(a)
    delta = x.dtype.type(SIGNED_SQRT_DELTA)

    def backward(g):
        return (g / (2 * np.sqrt(a + delta)),)

    return make_output("signed_sqrt", out, (x,), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12, axis: int = -1) -> Tensor:
    """x / max(||x||, eps) along ``axis`` (a flat vector normalizes as a whole)."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    guarded = norm > eps
    denom = np.where(guarded, norm, x.dtype.type(eps))
    out = x.data / denom

    def backward(g):
        proj = np.sum(out * g, axis=axis, keepdims=True)
        return (np.where(guarded, (g - out * proj) / denom, g / denom),)

    return make_output("l2_normalize", out, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-d matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimension mismatch: a has {a.shape[1]} columns, b has {b.shape[0]} rows")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_output("matmul", out, (a, b), backward)


def mse_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse_mean shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=diff.dtype)

    def backward(g):
        ga = (2.0 / n) * g * diff
        return ga.astype(a.dtype, copy=False), (-ga).astype(b.dtype, copy=False)

    return make_output("mse_mean", out, (a, b), backward)


# ---------------------------------------------------------------------------
# convolutional blocks
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 1) -> Tensor:
    """3x3 cross-correlation, stride 1, NCHW layout."""
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be [N,Cin,H,W], got {x.shape}")
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ValueError(f"conv2d weight must be [Cout,Cin,3,3], got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"conv2d Cin mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d bias must be [Cout={weight.shape[0]}], got {bias.shape}")
    if padding not in (0, 1):
        raise ValueError(f"conv2d padding must be 0 or 1, got {padding}")
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    ho, wo = h + 2 * padding - 2, w + 2 * padding - 2
    if ho < 1:
        raise ValueError(f"conv2d output height would be {ho} for H={h}")
    if wo < 1:
        raise ValueError(f"conv2d output width would be {wo} for W={w}")

    def im2col(arr):
        xp = np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else arr
        # [N, Cin, Ho, Wo, 3, 3] -> rows are output pixels, columns (Cin, kh, kw)
        windows = sliding_window_view(xp, (3, 3), axis=(2, 3))
        return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * 9)

    wmat = weight.data.reshape(cout, cin * 9)
    out = im2col(x.data) @ wmat.T
    out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        # columns are rebuilt rather than kept alive between forward and backward
        gw = (g2.T @ im2col(x.data)).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, 3, 3)
            gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for ki in range(3):
                for kj in range(3):
                    gxp[:, :, ki:ki + ho, kj:kj + wo] += dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            del dcols
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    return make_output("conv2d", out, (x, weight, bias), backward)


class BatchNormStats:
    """Running mean/variance for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.momentum = momentum
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)
        self.count = 0

    @property
    def initialized(self) -> bool:
        return self.count > 0

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean = ((1 - m) * self.mean + m * batch_mean).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * batch_var_unbiased).astype(self.var.dtype)
        self.count += 1


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    mode: str = "train",
    running: BatchNormStats | None = None,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode uses batch statistics and, when ``running`` is given, folds them
    into the running estimates. Eval mode reads the running estimates only.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm input must be [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm gamma/beta must be [{c}], got {gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ValueError("batch_norm eps must be positive")
    dt = x.dtype.type
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)

    if mode == "eval":
        if running is None or not running.initialized:
            raise RuntimeError("batch_norm eval mode needs running statistics; run at least one train step first")
        inv = 1.0 / np.sqrt(running.var.astype(x.dtype) + dt(eps))
        xhat = (x.data - running.mean.astype(x.dtype).reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = xhat * g4 + b4

        def backward_eval(g):
            gx = g * (g4 * inv.reshape(1, c, 1, 1))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_output("batch_norm", out, (x, gamma, beta), backward_eval)
    if mode != "train":
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.data.mean(axis=(0, 2, 3))
    xhat = x.data - mean.reshape(1, c, 1, 1)
    var = np.einsum("nchw,nchw->c", xhat, xhat) / m
    inv = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
    inv4 = inv.reshape(1, c, 1, 1)
    xhat *= inv4
    out = xhat * g4 + b4
    if running is not None:
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running.update(mean, unbiased)

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * g4
        gx = (inv4 / m) * (
            m * gxhat
            - gxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
        return gx, ggamma, gbeta

    return make_output("batch_norm", out, (x, gamma, beta), backward)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2/stride-2 max pooling; ties route the gradient to the first row-major hit."""
    if window != 2 or stride != 2:
        raise ValueError("only window=2, stride=2 pooling is supported")
    if x.ndim != 4:
        raise ValueError(f"max_pool2d input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2:
        raise ValueError(f"max_pool2d needs an even height, got {h}")
    if w % 2:
        raise ValueError(f"max_pool2d needs an even width, got {w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    del blocks

    def backward(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None].astype(np.intp), g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(gx),)

    return make_output("max_pool2d", out, (x,), backward)


# name -> primitive, used by the gradient audit for completeness checks
PRIMITIVES = {
    "add": add,
    "scale": scale,
    "reshape": reshape,
    "transpose": transpose,
    "take": take,
    "concat": concat,
    "total": total,
    "sum_over_axis": sum_over_axis,
    "relu": relu,
    "sigmoid": sigmoid,
    "signed_sqrt": signed_sqrt,
    "l2_normalize": l2_normalize,
    "matmul": matmul,
    "mse_mean": mse_mean,
    "conv2d": conv2d,
    "batch_norm": batch_norm,
    "max_pool2d": max_pool2d,
}
