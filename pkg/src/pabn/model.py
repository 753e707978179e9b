"""Pairwise alignment bilinear network.

Shared convolutional encoder, per-class summed support features, pairwise
bilinear pooling between class and query feature maps, signed-sqrt/L2
normalization, alignment penalties and a fully connected relation head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    BatchNormStats,
    Tensor,
    add,
    batch_norm,
    conv2d,
    l2_normalize,
    matmul,
    max_pool2d,
    mse_mean,
    relu,
    reshape,
    scale,
    sigmoid,
    signed_sqrt,
    sum_over_axis,
    take,
    transpose,
)

ALIGN_MODES = ("none", "loss1", "loss2")


@dataclass(frozen=True)
class ArchConfig:
    """Architecture knobs. Episode sizes are deliberately not part of it."""

    in_channels: int = 3
    channels: int = 64
    image_size: int = 84
    n_blocks: int = 4
    pool_blocks: tuple[int, ...] = (1, 2)
    hidden: tuple[int, ...] = (512, 64)
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % (2 ** len(self.pool_blocks)):
            raise ValueError(f"image_size {self.image_size} is not divisible by {2 ** len(self.pool_blocks)}")
        if any(not 1 <= b <= self.n_blocks for b in self.pool_blocks):
            raise ValueError(f"pool_blocks {self.pool_blocks} outside 1..{self.n_blocks}")

    @property
    def feature_size(self) -> int:
        return self.image_size // 2 ** len(self.pool_blocks)

    @property
    def hw(self) -> int:
        return self.feature_size ** 2

    @property
    def feature_dim(self) -> int:
        return self.channels * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_blocks"] = list(self.pool_blocks)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["pool_blocks"] = tuple(d.get("pool_blocks", (1, 2)))
        d["hidden"] = tuple(d.get("hidden", (512, 64)))
        return cls(**d)


@dataclass
class AlignMode:
    mode: str = "none"
    weight: float = 1.0

    def __post_init__(self):
        if self.mode not in ALIGN_MODES:
            raise ValueError(f"align mode must be one of {ALIGN_MODES}, got {self.mode!r}")
        if self.weight < 0:
            raise ValueError("alignment weight must be non-negative")
        if self.mode == "none":
            self.weight = 0.0


@dataclass
class FeatureMap:
    """Encoder output for one image, held as a c x (h*w) matrix."""

    values: Tensor
    h: int
    w: int

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.h * self.w:
            raise ValueError(f"feature values {self.values.shape} do not match h*w = {self.h}*{self.w}")

    @property
    def c(self) -> int:
        return self.values.shape[0]

    @property
    def hw(self) -> int:
        return self.h * self.w

    @classmethod
    def from_chw(cls, x: Tensor) -> "FeatureMap":
        c, h, w = x.shape
        return cls(reshape(x, (c, h * w)), h, w)

    def as_chw(self) -> Tensor:
        return reshape(self.values, (self.c, self.h, self.w))


@dataclass
class PabnParams:
    """All learnable tensors plus batch-norm running statistics."""

    arch: ArchConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    bn_stats: list[BatchNormStats] = field(default_factory=list)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: t.grad for k, t in self.tensors.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, s in enumerate(self.bn_stats):
            out[f"encoder.{i}.bn.running_mean"] = s.mean
            out[f"encoder.{i}.bn.running_var"] = s.var
            out[f"encoder.{i}.bn.num_batches"] = np.asarray(s.count, dtype=np.int64)
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for i, s in enumerate(self.bn_stats):
            s.mean = np.array(buffers[f"encoder.{i}.bn.running_mean"], dtype=np.float32)
            s.var = np.array(buffers[f"encoder.{i}.bn.running_var"], dtype=np.float32)
            s.count = int(buffers[f"encoder.{i}.bn.num_batches"])

    def frozen(self) -> "PabnParams":
        """View sharing storage but never recording gradients."""
        return PabnParams(
            self.arch,
            {k: Tensor(t.data, requires_grad=False, name=k, dtype=t.dtype) for k, t in self.tensors.items()},
            self.bn_stats,
        )

    def copy(self, dtype=None) -> "PabnParams":
        tensors = {}
        for k, t in self.tensors.items():
            tensors[k] = Tensor(t.data.copy(), requires_grad=True, name=k, dtype=dtype or t.dtype)
        stats = []
        for s in self.bn_stats:
            ns = BatchNormStats(s.mean.shape[0], s.momentum)
            ns.mean, ns.var, ns.count = s.mean.copy(), s.var.copy(), s.count
            stats.append(ns)
        return PabnParams(self.arch, tensors, stats)

    def with_tensors(self, replacements: dict[str, Tensor]) -> "PabnParams":
        merged = dict(self.tensors)
        merged.update(replacements)
        return PabnParams(self.arch, merged, self.bn_stats)


def parameter_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = arch.in_channels
    for i in range(arch.n_blocks):
        c = arch.channels
        shapes[f"encoder.{i}.conv.weight"] = (c, cin, 3, 3)
        shapes[f"encoder.{i}.conv.bias"] = (c,)
        shapes[f"encoder.{i}.bn.gamma"] = (c,)
        shapes[f"encoder.{i}.bn.beta"] = (c,)
        cin = c
    widths = (arch.feature_dim, *arch.hidden, 1)
    for j in range(len(widths) - 1):
        shapes[f"comparator.fc{j + 1}.weight"] = (widths[j], widths[j + 1])
        shapes[f"comparator.fc{j + 1}.bias"] = (widths[j + 1],)
    return shapes


def init_params(arch: ArchConfig, rng: np.random.Generator, zero_comparator: bool = False) -> PabnParams:
    """Fan-in scaled uniform weights, unit/zero batch-norm affine terms."""
    tensors = {}
    for name, shape in parameter_shapes(arch).items():
        if name.endswith("bn.gamma"):
            data = np.ones(shape, dtype=np.float32)
        elif name.endswith("bn.beta"):
            data = np.zeros(shape, dtype=np.float32)
        elif name.startswith("comparator") and zero_comparator:
            data = np.zeros(shape, dtype=np.float32)
        else:
            wname = name.rsplit(".", 1)[0] + ".weight"
            wshape = parameter_shapes(arch)[wname]
            fan_in = int(np.prod(wshape[1:])) if name.startswith("encoder") else wshape[0]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    stats = [BatchNormStats(arch.channels) for _ in range(arch.n_blocks)]
    return PabnParams(arch, tensors, stats)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


def encode_batch(images, params: PabnParams, mode: str = "train", update_stats: bool = True) -> Tensor:
    """[N, 3, S, S] images -> [N, c, S/4, S/4] feature tensor."""
    arch = params.arch
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4 or x.shape[1] != arch.in_channels:
        raise ValueError(f"encoder expects [N,{arch.in_channels},H,W] images, got {x.shape}")
    if x.shape[2:] != (arch.image_size, arch.image_size):
        raise ValueError(
            f"encoder expects {arch.image_size}x{arch.image_size} inputs, got {x.shape[2]}x{x.shape[3]}"
        )
    for i in range(arch.n_blocks):
        p = f"encoder.{i}"
        x = conv2d(x, params[f"{p}.conv.weight"], params[f"{p}.conv.bias"], padding=1)
        running = params.bn_stats[i] if (mode == "eval" or update_stats) else None
        x = batch_norm(x, params[f"{p}.bn.gamma"], params[f"{p}.bn.beta"], arch.bn_eps, mode, running)
        x = relu(x)
        if i + 1 in arch.pool_blocks:
            x = max_pool2d(x)
    return x


def encode(images, params: PabnParams, mode: str = "train") -> list[FeatureMap]:
    feats = encode_batch(images, params, mode)
    return [FeatureMap.from_chw(reshape(take(feats, [i]), feats.shape[1:])) for i in range(feats.shape[0])]


# ---------------------------------------------------------------------------
# pooling and alignment
# ---------------------------------------------------------------------------


def class_feature(support_maps: Sequence[FeatureMap]) -> FeatureMap:
    """Sum of the K support maps of one class."""
    if not support_maps:
        raise ValueError("class_feature needs at least one support map")
    first = support_maps[0]
    acc = first.values
    for m in support_maps[1:]:
        if m.values.shape != first.values.shape or (m.h, m.w) != (first.h, first.w):
            raise ValueError(f"support maps disagree in shape: {m.values.shape} vs {first.values.shape}")
        acc = add(acc, m.values)
    return FeatureMap(acc, first.h, first.w)


def _check_hw(fa: FeatureMap, fb: FeatureMap) -> None:
    if fa.hw != fb.hw:
        raise ValueError(f"feature maps have different spatial size: hw={fa.hw} vs hw={fb.hw}")


def self_bilinear(fa: FeatureMap, fb: FeatureMap) -> Tensor:
    """Averaged outer products of co-located feature vectors: (1/hw) Xa Xb^T."""
    _check_hw(fa, fb)
    return scale(matmul(fa.values, transpose(fb.values)), 1.0 / fa.hw)


def pairwise_bilinear(fa: FeatureMap, fb: FeatureMap) -> Tensor:
    """Class map times query map transposed; no 1/hw averaging."""
    _check_hw(fa, fb)
    if fa.c != fb.c:
        raise ValueError(f"feature maps have different channel counts: {fa.c} vs {fb.c}")
    return matmul(fa.values, transpose(fb.values))


def normalize_bilinear(m: Tensor) -> Tensor:
    """Flatten row-major, signed square root, then unit L2 norm."""
    return l2_normalize(signed_sqrt(reshape(m, (m.size,))))


def _check_same(fa: FeatureMap, fb: FeatureMap) -> None:
    if fa.values.shape != fb.values.shape:
        raise ValueError(f"alignment needs identical shapes, got {fa.values.shape} and {fb.values.shape}")


def align_loss1(fa: FeatureMap, fb: FeatureMap) -> Tensor:
    """Mean squared elementwise difference of two feature maps."""
    _check_same(fa, fb)
    return mse_mean(fa.values, fb.values)


def align_loss2(fa: FeatureMap, fb: FeatureMap) -> Tensor:
    """Sum over locations of the squared difference of channel-summed maps."""
    _check_same(fa, fb)
    sa = sum_over_axis(fa.values, 0)
    sb = sum_over_axis(fb.values, 0)
    return scale(mse_mean(sa, sb), fa.hw)


# ---------------------------------------------------------------------------
# comparator
# ---------------------------------------------------------------------------


def compare_batch(v: Tensor, params: PabnParams) -> Tensor:
    """[P, c*c] normalized bilinear features -> [P] relation scores in (0, 1)."""
    n_layers = len(params.arch.hidden) + 1
    expected = params["comparator.fc1.weight"].shape[0]
    if v.ndim != 2 or v.shape[1] != expected:
        raise ValueError(f"comparator expects feature length {expected}, got {v.shape[-1]}")
    x = v
    for j in range(1, n_layers + 1):
        x = add(matmul(x, params[f"comparator.fc{j}.weight"]), params[f"comparator.fc{j}.bias"])
        if j < n_layers:
            x = relu(x)
    x = sigmoid(x)
    return reshape(x, (v.shape[0],))


def compare(v: Tensor, params: PabnParams) -> Tensor:
    """Relation score for one flattened normalized bilinear feature."""
    if v.ndim != 1:
        raise ValueError(f"compare expects a flat feature vector, got shape {v.shape}")
    return reshape(compare_batch(reshape(v, (1, v.size)), params), ())


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


def _episode_layout(support_labels: np.ndarray, query_labels: np.ndarray) -> tuple[int, int, np.ndarray]:
    support_labels = np.asarray(support_labels)
    query_labels = np.asarray(query_labels)
    if support_labels.ndim != 1 or query_labels.ndim != 1:
        raise ValueError("episode labels must be 1-d")
    ways = int(support_labels.max()) + 1 if support_labels.size else 0
    if ways < 1:
        raise ValueError("episode has no support images")
    counts = np.bincount(support_labels, minlength=ways)
    if np.any(counts != counts[0]) or counts[0] < 1:
        raise ValueError(f"every class needs the same number of support images, got counts {counts.tolist()}")
    if query_labels.size == 0:
        raise ValueError("episode has no query images")
    if query_labels.min() < 0 or query_labels.max() >= ways:
        raise ValueError(f"query labels must lie in 0..{ways - 1}")
    order = np.argsort(support_labels, kind="stable")
    return ways, int(counts[0]), order


def episode_forward(episode, params: PabnParams, align: AlignMode | None = None, mode: str = "train"):
    """Relation scores [queries, ways] and the mean per-pair alignment penalty.

    Support and query images are encoded together in one batch. Pair (q, k)
    pools class feature k (left) against query q (right).
    """
    align = align or AlignMode()
    ways, shots, order = _episode_layout(episode.support_labels, episode.query_labels)
    support = np.asarray(episode.support_images)[order]
    query = np.asarray(episode.query_images)
    n_support, n_query = support.shape[0], query.shape[0]
    dtype = params["encoder.0.conv.weight"].dtype
    images = Tensor(np.concatenate([support, query]).astype(dtype, copy=False))

    feats = encode_batch(images, params, mode)
    _, c, h, w = feats.shape
    hw = h * w
    flat = reshape(feats, (n_support + n_query, c * hw))
    classes = sum_over_axis(reshape(take(flat, np.arange(n_support)), (ways, shots, c * hw)), 1)
    queries = take(flat, np.arange(n_support, n_support + n_query))

    # all (query, class) Gram blocks from a single [C*c, hw] x [hw, M*c] product
    gram = matmul(reshape(classes, (ways * c, hw)), transpose(reshape(queries, (n_query * c, hw))))
    pairs = reshape(transpose(reshape(gram, (ways, c, n_query, c)), (2, 0, 1, 3)), (n_query * ways, c * c))
    pooled = l2_normalize(signed_sqrt(pairs), axis=-1)
    scores = reshape(compare_batch(pooled, params), (n_query, ways))

    if align.mode == "none":
        return scores, Tensor(np.zeros((), dtype=dtype))
    cls_idx = np.tile(np.arange(ways), n_query)
    q_idx = np.repeat(np.arange(n_query), ways)
    if align.mode == "loss1":
        penalty = mse_mean(take(classes, cls_idx), take(queries, q_idx))
    else:
        sc = sum_over_axis(reshape(classes, (ways, c, hw)), 1)
        sq = sum_over_axis(reshape(queries, (n_query, c, hw)), 1)
        penalty = scale(mse_mean(take(sc, cls_idx), take(sq, q_idx)), hw)
    return scores, penalty


def one_hot(labels, ways: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, ways), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def episode_loss(scores: Tensor, labels, align_penalty: Tensor | None = None, weight: float = 0.0) -> Tensor:
    """Relation MSE against label similarity plus weighted alignment penalty."""
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise ValueError(f"scores {scores.shape} do not match {labels.size} query labels")
    target = Tensor(one_hot(labels, scores.shape[1], scores.dtype))
    loss = mse_mean(scores, target)
    if align_penalty is not None and weight != 0:
        loss = add(loss, scale(align_penalty, weight))
    return loss


__all__ = [
    "ALIGN_MODES",
    "AlignMode",
    "ArchConfig",
    "FeatureMap",
    "PabnParams",
    "align_loss1",
    "align_loss2",
    "class_feature",
    "compare",
    "compare_batch",
    "encode",
    "encode_batch",
    "episode_forward",
    "episode_loss",
    "init_params",
    "normalize_bilinear",
    "one_hot",
    "pairwise_bilinear",
    "parameter_shapes",
    "self_bilinear",
]
