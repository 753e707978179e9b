"""Finite-difference audit of every differentiable primitive and of the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import PRIMITIVES, BatchNormStats, Tensor, grad_check
from .autodiff import functional as F
from .autodiff.tensor import make_output
from .model import AlignMode, ArchConfig, PabnParams, episode_forward, episode_loss, init_params

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class AuditRow:
    name: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.threshold)


def _project(y: Tensor, w: np.ndarray) -> Tensor:
    # fixed random linear read-out; deliberately not a registered primitive so
    # injected faults stay attributable to the op under test
    out = np.asarray(np.sum(y.data * w), dtype=y.dtype)
    return make_output("audit_projection", out, (y,), lambda g: (g * w,))


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, size=shape)


def _case(rng: np.random.Generator, name: str) -> tuple[Callable[..., Tensor], list[np.ndarray]]:
    """(scalar function, inputs) exercising primitive ``name`` alone."""
    normal = rng.standard_normal

    def projected(op, out_shape_of):
        w = normal(out_shape_of)
        return lambda *xs: _project(op(*xs), w)

    if name == "add":
        return projected(F.add, (3, 4)), [normal((3, 4)), normal((4,))]
    if name == "scale":
        return projected(lambda x: F.scale(x, -1.7), (3, 4)), [normal((3, 4))]
    if name == "reshape":
        return projected(lambda x: F.reshape(x, (3, 4)), (3, 4)), [normal((2, 6))]
    if name == "transpose":
        return projected(lambda x: F.transpose(x, (2, 0, 1)), (4, 2, 3)), [normal((2, 3, 4))]
    if name == "take":
        idx = [2, 0, 2, 1]
        return projected(lambda x: F.take(x, idx), (4, 3)), [normal((3, 3))]
    if name == "concat":
        return projected(lambda a, b: F.concat([a, b], axis=1), (2, 5)), [normal((2, 2)), normal((2, 3))]
    if name == "total":
        return F.total, [normal((3, 4))]
    if name == "sum_over_axis":
        return projected(lambda x: F.sum_over_axis(x, 1), (2, 4)), [normal((2, 3, 4))]
    if name == "relu":
        return projected(F.relu, (4, 5)), [_away_from_zero(rng, (4, 5))]
    if name == "sigmoid":
        return projected(F.sigmoid, (4, 5)), [2 * normal((4, 5))]
    if name == "signed_sqrt":
        return projected(F.signed_sqrt, (4, 5)), [_away_from_zero(rng, (4, 5), 0.3, 2.0)]
    if name == "l2_normalize":
        return projected(lambda x: F.l2_normalize(x, axis=-1), (3, 5)), [normal((3, 5))]
    if name == "matmul":
        return projected(F.matmul, (3, 2)), [normal((3, 4)), normal((4, 2))]
    if name == "mse_mean":
        return F.mse_mean, [normal((3, 4)), normal((3, 4))]
    if name == "conv2d":
        pad = int(rng.integers(0, 2))
        out = 6 + 2 * pad - 2
        return (
            projected(lambda x, w, b: F.conv2d(x, w, b, padding=pad), (2, 4, out, out)),
            [normal((2, 3, 6, 6)), normal((4, 3, 3, 3)), normal((4,))],
        )
    if name == "batch_norm":
        return (
            projected(lambda x, g, b: F.batch_norm(x, g, b, mode="train"), (4, 2, 3, 3)),
            [normal((4, 2, 3, 3)) * 2 + 0.5, 1 + 0.3 * normal((2,)), normal((2,))],
        )
    if name == "max_pool2d":
        # distinct values with gaps well above the finite-difference step
        vals = rng.permutation(2 * 2 * 4 * 4).astype(np.float64) * 0.1 + rng.uniform(0, 0.01, 64)
        return projected(F.max_pool2d, (2, 2, 2, 2)), [vals.reshape(2, 2, 4, 4)]
    raise KeyError(f"no audit case for primitive {name!r}")


def audit_primitives(seeds=range(5), tol: float = PRIMITIVE_TOL) -> list[AuditRow]:
    rows = []
    for name in PRIMITIVES:
        worst = 0.0
        for seed in seeds:
            fn, inputs = _case(np.random.default_rng([seed, len(name)]), name)
            worst = max(worst, grad_check(fn, inputs))
        rows.append(AuditRow(name, worst, tol))
    return rows


TOY_ARCH = ArchConfig(channels=4, image_size=8, hidden=(8, 4))


def toy_episode(rng: np.random.Generator, ways: int = 2, shots: int = 1, queries: int = 2, size: int = 8):
    from types import SimpleNamespace

    return SimpleNamespace(
        support_images=rng.uniform(0, 1, (ways * shots, 3, size, size)),
        support_labels=np.repeat(np.arange(ways), shots),
        query_images=rng.uniform(0, 1, (ways * queries, 3, size, size)),
        query_labels=np.repeat(np.arange(ways), queries),
    )


def model_loss_fn(params: PabnParams, episode, align: AlignMode) -> Callable[..., Tensor]:
    """Episode loss as a function of every learnable tensor (in ``params`` order)."""
    names = params.names()

    def fn(*tensors):
        stats = [BatchNormStats(params.arch.channels) for _ in params.bn_stats]
        p = PabnParams(params.arch, dict(zip(names, tensors)), stats)
        scores, penalty = episode_forward(episode, p, align, "train")
        return episode_loss(scores, episode.query_labels, penalty, align.weight)

    return fn


def kink_margins(params: PabnParams, episode) -> tuple[float, float]:
    """Distances of the forward pass to non-differentiable points.

    Returns ``(activation, gram)``: the smallest |ReLU input| (encoder and
    comparator) or top-two gap of a max-pool window, and the smallest
    nonzero pairwise Gram entry fed to the signed square root.
    """
    arch = params.arch
    data = {k: np.asarray(t.data, dtype=np.float64) for k, t in params.tensors.items()}
    t = lambda a: Tensor(a, dtype=np.float64)
    x = np.concatenate([episode.support_images, episode.query_images]).astype(np.float64)
    margins, gram_margin = [], np.inf
    for i in range(arch.n_blocks):
        p = f"encoder.{i}"
        x = F.conv2d(t(x), t(data[f"{p}.conv.weight"]), t(data[f"{p}.conv.bias"]), padding=1)
        x = F.batch_norm(x, t(data[f"{p}.bn.gamma"]), t(data[f"{p}.bn.beta"]), arch.bn_eps, "train").data
        margins.append(np.abs(x).min())
        x = np.maximum(x, 0)
        if i + 1 in arch.pool_blocks:
            n, c, h, w = x.shape
            win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
            top = np.sort(win, axis=-1)
            live = top[..., -1] > 0
            if live.any():
                margins.append((top[..., -1] - top[..., -2])[live].min())
            x = top[..., -1]
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    gram = np.einsum("aih,bjh->abij", flat, flat)
    if (gram > 0).any():
        gram_margin = gram[gram > 0].min()
    v = gram.reshape(n * n, c * c)
    v = np.sign(v) * np.sqrt(np.abs(v))
    v = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    for j in range(1, len(arch.hidden) + 1):
        v = v @ data[f"comparator.fc{j}.weight"] + data[f"comparator.fc{j}.bias"]
        margins.append(np.abs(v).min())
        v = np.maximum(v, 0)
    return float(min(margins)), float(gram_margin)


# ReLU, max-pool and the signed square root are non-smooth; the model check
# uses a small float64 step and screens test points that sit too close to a
# kink for central differences to be meaningful
MODEL_STEP = 1e-5
ACTIVATION_MARGIN = 1e-4
GRAM_MARGIN = 1e-3
MAX_ATTEMPTS = 100


def model_test_point(seed: int, arch: ArchConfig = TOY_ARCH):
    """First (params, episode, attempt) drawn from ``seed`` that clears both margins."""
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([seed, attempt])
        params = init_params(arch, rng)
        episode = toy_episode(rng, size=arch.image_size)
        activation, gram = kink_margins(params, episode)
        if activation >= ACTIVATION_MARGIN and gram >= GRAM_MARGIN:
            return params, episode, attempt
    raise RuntimeError(f"no smooth test point found for seed {seed} in {MAX_ATTEMPTS} attempts")


def audit_model(seed: int = 0, tol: float = MODEL_TOL, arch: ArchConfig = TOY_ARCH) -> list[AuditRow]:
    params, episode, _ = model_test_point(seed, arch)
    rows = []
    for mode in ("none", "loss1", "loss2"):
        align = AlignMode(mode, 0.5)
        fn = model_loss_fn(params, episode, align)
        err = grad_check(fn, [t.data for t in params.tensors.values()], step=MODEL_STEP)
        rows.append(AuditRow(f"model[{mode}]", err, tol))
    return rows


def format_table(rows: list[AuditRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'op'.ljust(width)}  max_rel_err  threshold  result"]
    for r in rows:
        lines.append(
            f"{r.name.ljust(width)}  {r.max_rel_error:11.3e}  {r.threshold:9.0e}  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
