"""Central finite-difference gradient checker (runs in float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    floor = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return np.abs(analytic - numeric) / floor


def numeric_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int, step: float) -> np.ndarray:
    x = inputs[index].data
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(*inputs).data.item()
        flat[i] = orig - step
        lo = fn(*inputs).data.item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, step: float = 1e-3) -> float:
    """Largest relative error between backward() and central differences.

    ``fn`` receives float64 copies of ``inputs`` (all requiring grad) and must
    return a scalar tensor. Error per element is
    ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    tensors = [
        Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
        for x in inputs
    ]
    out = fn(*tensors)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    for k, t in enumerate(tensors):
        t.grad = None
        num = numeric_gradient(fn, tensors, k, step)
        if num.size:
            worst = max(worst, float(relative_error(analytic[k], num).max()))
    return worst
