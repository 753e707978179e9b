"""Dataset indexing, class splits and C-way K-shot episode sampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ppm import ImageFormatError, decode_and_resize, read_ppm_header


class DatasetError(ValueError):
    """Dataset on disk cannot satisfy a request."""


@dataclass
class DatasetIndex:
    """Sorted class names and per-class sorted image file lists under ``root``."""

    root: Path
    classes: list[str]
    images: dict[str, list[str]]
    sizes: dict[str, tuple[int, int]] = field(default_factory=dict, repr=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.classes)

    def count(self, name: str) -> int:
        return len(self.images[name])

    def path(self, image_id: str) -> Path:
        return self.root / image_id

    def image_ids(self, name: str) -> list[str]:
        return [f"{name}/{f}" for f in self.images[name]]

    def subset(self, names: Sequence[str]) -> "DatasetIndex":
        names = sorted(names)
        missing = [n for n in names if n not in self.images]
        if missing:
            raise DatasetError(f"unknown classes: {missing}")
        sizes = {k: v for k, v in self.sizes.items() if k.split("/", 1)[0] in set(names)}
        return DatasetIndex(self.root, names, {n: self.images[n] for n in names}, sizes, self._cache)

    def load(self, image_id: str, size: int = 84) -> np.ndarray:
        key = (image_id, size)
        arr = self._cache.get(key)
        if arr is None:
            arr = decode_and_resize(self.path(image_id), size)
            arr.setflags(write=False)
            self._cache[key] = arr
        return arr


def load_dataset(root) -> DatasetIndex:
    """Index ``root/<class>/<image>.ppm``; empty class directories are skipped with a warning."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    classes, images, sizes = [], {}, {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f.name for f in d.iterdir() if f.is_file() and f.suffix.lower() == ".ppm")
        if not files:
            warnings.warn(f"class directory {d} holds no .ppm images; excluded", stacklevel=2)
            continue
        for f in files:
            try:
                w, h, _ = read_ppm_header(d / f)
            except (OSError, ImageFormatError) as exc:
                raise DatasetError(f"unreadable image {d / f}: {exc}") from exc
            sizes[f"{d.name}/{f}"] = (w, h)
        classes.append(d.name)
        images[d.name] = files
    return DatasetIndex(root, classes, images, sizes)


@dataclass
class SplitConfig:
    n_auxiliary: int | None = None
    n_target: int | None = None
    seed: int = 0
    auxiliary: list[str] | None = None
    target: list[str] | None = None


# class splits of the four fine-grained benchmarks: (total, auxiliary, target)
BENCHMARK_SPLITS = {
    "cub": (200, 150, 50),
    "dogs": (120, 90, 30),
    "cars": (196, 147, 49),
    "nabirds": (555, 416, 139),
}


def split_class_names(names: Sequence[str], cfg: SplitConfig) -> tuple[list[str], list[str]]:
    names = sorted(names)
    if cfg.auxiliary is not None or cfg.target is not None:
        aux, tgt = list(cfg.auxiliary or []), list(cfg.target or [])
        overlap = set(aux) & set(tgt)
        if overlap:
            raise DatasetError(f"auxiliary and target classes overlap: {sorted(overlap)}")
        unknown = (set(aux) | set(tgt)) - set(names)
        if unknown:
            raise DatasetError(f"unknown classes in split: {sorted(unknown)}")
        return sorted(aux), sorted(tgt)
    if cfg.n_auxiliary is None or cfg.n_target is None:
        raise DatasetError("split needs either class counts or explicit class lists")
    if cfg.n_auxiliary < 0 or cfg.n_target < 0 or cfg.n_auxiliary + cfg.n_target > len(names):
        raise DatasetError(
            f"cannot split {len(names)} classes into {cfg.n_auxiliary} auxiliary + {cfg.n_target} target"
        )
    order = np.random.default_rng(cfg.seed).permutation(len(names))
    shuffled = [names[i] for i in order]
    aux = shuffled[:cfg.n_auxiliary]
    tgt = shuffled[cfg.n_auxiliary:cfg.n_auxiliary + cfg.n_target]
    return sorted(aux), sorted(tgt)


def split_classes(index: DatasetIndex, cfg: SplitConfig) -> tuple[DatasetIndex, DatasetIndex]:
    """Seeded disjoint auxiliary/target partition of the classes."""
    aux, tgt = split_class_names(index.classes, cfg)
    return index.subset(aux), index.subset(tgt)


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int = 5
    shots: int = 1
    queries: int = 15

    def __post_init__(self):
        if self.ways < 2:
            raise ValueError(f"ways must be >= 2, got {self.ways}")
        if self.shots < 1:
            raise ValueError(f"shots must be >= 1, got {self.shots}")
        if self.queries < 1:
            raise ValueError(f"queries must be >= 1, got {self.queries}")

    @property
    def n_images(self) -> int:
        return self.ways * (self.shots + self.queries)


@dataclass
class EpisodePlan:
    """Which images an episode uses, before decoding.

    ``class_names[k]`` is the source class relabeled as index k. Support and
    query ids are grouped by class in label order.
    """

    spec: EpisodeSpec
    class_names: list[str]
    support_ids: list[str]
    query_ids: list[str]

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.spec.ways), self.spec.shots)

    @property
    def query_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.spec.ways), self.spec.queries)

    def pairs(self) -> list[tuple[str, str]]:
        """(class name, image id) for every image in the episode."""
        s = [(self.class_names[k], i) for k, i in zip(self.support_labels, self.support_ids)]
        q = [(self.class_names[k], i) for k, i in zip(self.query_labels, self.query_ids)]
        return s + q

    def relabel(self, perm: Sequence[int]) -> "EpisodePlan":
        """New plan in which old class ``perm[k]`` becomes class ``k``."""
        k, q = self.spec.shots, self.spec.queries
        perm = list(perm)
        if sorted(perm) != list(range(self.spec.ways)):
            raise ValueError(f"not a permutation of 0..{self.spec.ways - 1}: {perm}")
        return EpisodePlan(
            self.spec,
            [self.class_names[p] for p in perm],
            [i for p in perm for i in self.support_ids[p * k:(p + 1) * k]],
            [i for p in perm for i in self.query_ids[p * q:(p + 1) * q]],
        )


@dataclass
class Episode:
    plan: EpisodePlan
    support_images: np.ndarray
    query_images: np.ndarray

    @property
    def spec(self) -> EpisodeSpec:
        return self.plan.spec

    @property
    def support_labels(self) -> np.ndarray:
        return self.plan.support_labels

    @property
    def query_labels(self) -> np.ndarray:
        return self.plan.query_labels

    @property
    def n_images(self) -> int:
        return self.support_images.shape[0] + self.query_images.shape[0]


def check_supports(index: DatasetIndex, spec: EpisodeSpec) -> None:
    need = spec.shots + spec.queries
    eligible = [c for c in index.classes if index.count(c) >= need]
    if len(eligible) < spec.ways:
        short = {c: index.count(c) for c in index.classes if index.count(c) < need}
        raise DatasetError(
            f"episode needs {spec.ways} classes with >= {need} images each; only {len(eligible)} qualify"
            + (f" (short: {short})" if short else "")
        )


def draw_episode(index: DatasetIndex, spec: EpisodeSpec, rng: np.random.Generator) -> EpisodePlan:
    """Classes without replacement, then K+Q images per class without replacement."""
    check_supports(index, spec)
    need = spec.shots + spec.queries
    eligible = [c for c in index.classes if index.count(c) >= need]
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=spec.ways, replace=False)]
    support, query = [], []
    for name in chosen:
        ids = index.image_ids(name)
        picks = rng.choice(len(ids), size=need, replace=False)
        support.extend(ids[i] for i in picks[:spec.shots])
        query.extend(ids[i] for i in picks[spec.shots:])
    return EpisodePlan(spec, chosen, support, query)


def materialize(plan: EpisodePlan, index: DatasetIndex, image_size: int = 84) -> Episode:
    support = np.stack([index.load(i, image_size) for i in plan.support_ids])
    query = np.stack([index.load(i, image_size) for i in plan.query_ids])
    return Episode(plan, support, query)


def sample_episode(
    index: DatasetIndex, spec: EpisodeSpec, rng: np.random.Generator, image_size: int = 84
) -> Episode:
    return materialize(draw_episode(index, spec, rng), index, image_size)
