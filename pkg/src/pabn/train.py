"""Episodic meta-training, evaluation with 95% intervals, and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .autodiff import AdamState, adam_step, backward
from .data import DatasetIndex, EpisodePlan, EpisodeSpec, check_supports, draw_episode, materialize
from .model import AlignMode, ArchConfig, PabnParams, episode_forward, episode_loss, init_params, parameter_shapes

log = logging.getLogger(__name__)

MAGIC = b"PABN"
FORMAT_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, episode: int, plan: EpisodePlan, loss: float):
        self.episode = episode
        self.plan = plan
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss} at episode {episode} (classes {plan.class_names}, "
            f"support {plan.support_ids})"
        )


@dataclass
class TrainConfig:
    spec: EpisodeSpec = field(default_factory=EpisodeSpec)
    align: AlignMode = field(default_factory=AlignMode)
    n_episodes: int = 1000
    lr: float = 0.001
    seed: int = 0
    checkpoint_path: str | None = None
    log_path: str | None = None
    log_interval: int = 10
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")
        if self.log_interval < 1:
            raise ValueError("log_interval must be >= 1")


@dataclass
class Checkpoint:
    arch: ArchConfig
    tensors: dict[str, np.ndarray]
    adam: AdamState
    episode: int = 0
    rng_state: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def capture(cls, params: PabnParams, adam: AdamState, episode: int, rng: np.random.Generator) -> "Checkpoint":
        tensors = {k: t.data.copy() for k, t in params.tensors.items()}
        tensors.update({k: np.array(v, copy=True) for k, v in params.buffers().items()})
        adam_copy = AdamState(
            adam.lr, adam.beta1, adam.beta2, adam.eps, adam.t,
            {k: v.copy() for k, v in adam.m.items()},
            {k: v.copy() for k, v in adam.v.items()},
        )
        return cls(params.arch, tensors, adam_copy, episode, rng.bit_generator.state)

    def params(self) -> PabnParams:
        params = init_params(self.arch, np.random.default_rng(0))
        for name, t in params.tensors.items():
            t.data = np.array(self.tensors[name], dtype=np.float32)
        params.load_buffers(self.tensors)
        return params

    def rng(self) -> np.random.Generator:
        rng = np.random.default_rng()
        if self.rng_state:
            rng.bit_generator.state = self.rng_state
        return rng


def expected_tensor_names(arch: ArchConfig) -> list[str]:
    names = list(parameter_shapes(arch))
    for i in range(arch.n_blocks):
        names += [f"encoder.{i}.bn.running_mean", f"encoder.{i}.bn.running_var", f"encoder.{i}.bn.num_batches"]
    return names


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def _write_bytes(fh: BinaryIO, data: bytes) -> None:
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _write_tensor(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    tag = TAG_OF.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    _write_bytes(fh, name.encode("utf-8"))
    fh.write(struct.pack("<BB", tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated payload at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.blob().decode("utf-8")
        tag, rank = self.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"{self.path}: tensor {name!r} has unknown dtype tag {tag}")
        dims = self.unpack(f"<{rank}I") if rank else ()
        dt = DTYPE_TAGS[tag]
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(dims)
        return name, arr.astype(dt.newbyteorder("="))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        _write_bytes(fh, json.dumps(ckpt.arch.to_dict(), sort_keys=True).encode("utf-8"))
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name in expected_tensor_names(ckpt.arch):
            _write_tensor(fh, name, ckpt.tensors[name])
        adam = ckpt.adam
        names = sorted(adam.m)
        fh.write(struct.pack("<I", 2 * len(names) + 2))
        for name in names:
            _write_tensor(fh, f"m/{name}", adam.m[name])
        for name in names:
            _write_tensor(fh, f"v/{name}", adam.v[name])
        _write_tensor(fh, "adam.t", np.asarray(adam.t, dtype=np.int64))
        _write_tensor(fh, "adam.hparams", np.array([adam.lr, adam.beta1, adam.beta2, adam.eps], dtype=np.float64))
        fh.write(struct.pack("<Q", ckpt.episode))
        _write_bytes(fh, json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8"))
    tmp.replace(path)


def load_checkpoint(path, arch: ArchConfig | None = None) -> Checkpoint:
    """Read a checkpoint; ``arch``, when given, must match the stored architecture."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, not a PABN checkpoint")
    r.pos = 4
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: version mismatch (file {version}, supported {FORMAT_VERSION})")
    stored = ArchConfig.from_dict(json.loads(r.blob().decode("utf-8")))
    if arch is not None and stored != arch:
        raise CheckpointError(f"{path}: architecture mismatch (file {stored.to_dict()}, expected {arch.to_dict()})")
    (count,) = r.unpack("<I")
    expected = expected_tensor_names(stored)
    if count != len(expected):
        raise CheckpointError(f"{path}: tensor-count mismatch (file {count}, architecture needs {len(expected)})")
    tensors = dict(r.tensor() for _ in range(count))
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    shapes = parameter_shapes(stored)
    for name, shape in shapes.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {shape}")

    (n_adam,) = r.unpack("<I")
    adam_tensors = dict(r.tensor() for _ in range(n_adam))
    if "adam.hparams" not in adam_tensors or "adam.t" not in adam_tensors:
        raise CheckpointError(f"{path}: optimizer block lacks adam.t or adam.hparams")
    hp = adam_tensors.pop("adam.hparams")
    t = int(adam_tensors.pop("adam.t"))
    adam = AdamState(float(hp[0]), float(hp[1]), float(hp[2]), float(hp[3]), t)
    for key, arr in adam_tensors.items():
        kind, name = key.split("/", 1)
        (adam.m if kind == "m" else adam.v)[name] = np.array(arr)
    (episode,) = r.unpack("<Q")
    rng_state = json.loads(r.blob().decode("utf-8"))
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(stored, tensors, adam, episode, rng_state, version)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[tuple[int, float, float]]


def write_log(rows: Sequence[tuple[int, float, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "loss", "align_penalty"])
        for ep, loss, pen in rows:
            w.writerow([ep, repr(loss), repr(pen)])


def train(
    cfg: TrainConfig,
    auxiliary: DatasetIndex,
    params: PabnParams | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Run ``cfg.n_episodes`` episodes of sample -> forward -> loss -> backward -> Adam."""
    check_supports(auxiliary, cfg.spec)
    init_seq, episode_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    if resume is not None:
        params = resume.params()
        adam = resume.adam
        rng = resume.rng()
        start = resume.episode
    else:
        if params is None:
            params = init_params(cfg.arch, np.random.default_rng(init_seq))
        adam = AdamState(lr=cfg.lr)
        rng = np.random.default_rng(episode_seq)
        start = 0

    rows: list[tuple[int, float, float]] = []
    last = start + cfg.n_episodes
    for episode in range(start + 1, last + 1):
        plan = draw_episode(auxiliary, cfg.spec, rng)
        ep = materialize(plan, auxiliary, params.arch.image_size)
        scores, penalty = episode_forward(ep, params, cfg.align, "train")
        loss = episode_loss(scores, ep.query_labels, penalty, cfg.align.weight)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(episode, plan, value)
        params.zero_grad()
        backward(loss)
        adam_step(params.tensors, params.grads(), adam)
        if episode % cfg.log_interval == 0 or episode == last:
            rows.append((episode, value, penalty.item()))
            log.info("episode %d loss %.5f align %.5f", episode, value, penalty.item())

    ckpt = Checkpoint.capture(params, adam, last, rng)
    if cfg.checkpoint_path:
        save_checkpoint(ckpt, cfg.checkpoint_path)
    if cfg.log_path:
        write_log(rows, cfg.log_path)
    return TrainResult(ckpt, rows)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def classify_episode(scores) -> np.ndarray:
    """Argmax over classes per query; ties go to the lowest class index."""
    s = scores.data if hasattr(scores, "data") else np.asarray(scores)
    return np.argmax(s, axis=1)


def episode_accuracy(scores, labels) -> float:
    return float(np.mean(classify_episode(scores) == np.asarray(labels)))


def confidence_interval(accuracies: Sequence[float]) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width (sample std, n-1)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    n = acc.size
    if n < 2:
        raise ValueError("a confidence interval needs at least two episodes")
    return float(acc.mean()), float(1.96 * acc.std(ddof=1) / math.sqrt(n))


def format_pm(mean: float, half_width: float) -> str:
    """Percent with two decimals, e.g. 0.6671, 0.0043 -> '66.71±0.43'."""
    return f"{mean * 100:.2f}±{half_width * 100:.2f}"


@dataclass
class EvalReport:
    accuracies: list[float]
    mean: float
    half_width_95: float
    n_episodes: int
    spec: EpisodeSpec
    seed: int
    ci_over: str = "episodes"

    @classmethod
    def from_accuracies(cls, accuracies: Sequence[float], spec: EpisodeSpec, seed: int) -> "EvalReport":
        mean, hw = confidence_interval(accuracies)
        return cls([float(a) for a in accuracies], mean, hw, len(accuracies), spec, seed)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "half_width_95": self.half_width_95,
            "n_episodes": self.n_episodes,
            "spec": {"ways": self.spec.ways, "shots": self.spec.shots, "queries": self.spec.queries},
            "seed": self.seed,
            "ci_over": self.ci_over,
            "formatted": format_pm(self.mean, self.half_width_95),
            "accuracies": self.accuracies,
        }


def calibrate_batch_norm(params: PabnParams, index: DatasetIndex, spec: EpisodeSpec, seed: int = 0, n: int = 1) -> None:
    """Populate running statistics with gradient-free train-mode passes (no parameter update)."""
    rng = np.random.default_rng(seed)
    frozen = params.frozen()
    for _ in range(n):
        ep = materialize(draw_episode(index, spec, rng), index, params.arch.image_size)
        episode_forward(ep, frozen, AlignMode(), "train")


def evaluate(model, index: DatasetIndex, spec: EpisodeSpec, n_episodes: int = 600, seed: int = 0) -> EvalReport:
    """Mean accuracy over ``n_episodes`` eval-mode episodes with a 95% interval.

    ``model`` is a :class:`Checkpoint` or :class:`PabnParams`. The episode
    stream depends only on ``seed``.
    """
    if n_episodes < 2:
        raise ValueError("evaluation needs n_episodes >= 2 for a confidence interval")
    check_supports(index, spec)
    params = model.params() if isinstance(model, Checkpoint) else model
    frozen = params.frozen()
    rng = np.random.default_rng(seed)
    plans = [draw_episode(index, spec, rng) for _ in range(n_episodes)]
    accs = []
    for plan in plans:
        ep = materialize(plan, index, params.arch.image_size)
        scores, _ = episode_forward(ep, frozen, AlignMode(), "eval")
        accs.append(episode_accuracy(scores, ep.query_labels))
    return EvalReport.from_accuracies(accs, spec, seed)
