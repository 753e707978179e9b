"""Synthetic fine-grained dataset.

Every class draws the same striped, elliptical "specimen" on a noisy
background. Classes differ only in three subtle attributes: stripe
frequency, the position of a small marker patch, and a hue offset of the
body colour. Individual images jitter position, scale, brightness and noise.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ppm import write_ppm

STRIPE_FREQS = (2.0, 3.0, 4.0, 5.0, 6.0)
# marker anchor angles around the body outline (radians)
MARKER_ANGLES = (0.0, 0.4 * np.pi, 0.8 * np.pi, 1.2 * np.pi, 1.6 * np.pi)
HUE_OFFSETS = (0.0, 0.04, 0.08, 0.12)
BASE_HUE = 0.07


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 30
    n_images_per_class: int = 40
    seed: int = 7
    image_size: int = 84
    translate_jitter: float = 0.04
    scale_jitter: float = 0.06
    noise_std: float = 0.04

    def __post_init__(self):
        if self.n_classes < 10:
            raise ValueError(f"n_classes must be >= 10, got {self.n_classes}")
        if self.n_images_per_class < 20:
            raise ValueError(f"n_images_per_class must be >= 20, got {self.n_images_per_class}")
        limit = len(STRIPE_FREQS) * len(MARKER_ANGLES) * len(HUE_OFFSETS)
        if self.n_classes > limit:
            raise ValueError(f"at most {limit} distinct synthetic classes are available")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")


def class_attributes(spec: SyntheticSpec) -> list[dict]:
    grid = [
        (f, m, h)
        for f in range(len(STRIPE_FREQS))
        for m in range(len(MARKER_ANGLES))
        for h in range(len(HUE_OFFSETS))
    ]
    order = np.random.default_rng(spec.seed).permutation(len(grid))[:spec.n_classes]
    return [
        {
            "name": f"class_{k:03d}",
            "stripe_freq": STRIPE_FREQS[grid[i][0]],
            "marker_angle": float(MARKER_ANGLES[grid[i][1]]),
            "hue_offset": HUE_OFFSETS[grid[i][2]],
        }
        for k, i in enumerate(order)
    ]


def render(attrs: dict, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """One [S, S, 3] uint8 image of the given class."""
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    xx = (xx + 0.5) / s
    yy = (yy + 0.5) / s

    cx = 0.5 + rng.uniform(-spec.translate_jitter, spec.translate_jitter)
    cy = 0.5 + rng.uniform(-spec.translate_jitter, spec.translate_jitter)
    k = 1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter)
    rx, ry = 0.33 * k, 0.22 * k
    u = (xx - cx) / rx
    v = (yy - cy) / ry
    body = u * u + v * v <= 1.0

    bg_level = 0.45 + rng.uniform(-0.05, 0.05)
    img = np.full((s, s, 3), bg_level)
    img += rng.normal(0, spec.noise_std * 1.5, size=(s, s, 1)) * 0.5

    hue = (BASE_HUE + attrs["hue_offset"]) % 1.0
    value = 0.78 + rng.uniform(-0.05, 0.05)
    base = np.array(colorsys.hsv_to_rgb(hue, 0.6, value))
    stripes = 0.5 + 0.5 * np.cos(np.pi * attrs["stripe_freq"] * (u + 1.0))
    shade = 1.0 - 0.45 * (stripes > 0.5)
    img[body] = base * shade[body, None]

    theta = attrs["marker_angle"]
    mx = cx + 0.6 * rx * np.cos(theta)
    my = cy + 0.6 * ry * np.sin(theta)
    half = 0.055 * k
    marker = (np.abs(xx - mx) <= half) & (np.abs(yy - my) <= half)
    img[marker] = (0.12, 0.12, 0.35)

    img += rng.normal(0, spec.noise_std, size=img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec, out_path) -> dict:
    """Write ``<out>/<class>/<nnn>.ppm`` plus ``manifest.json``; returns the manifest."""
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    attrs = class_attributes(spec)
    seeds = np.random.SeedSequence(spec.seed).spawn(len(attrs))
    for a, ss in zip(attrs, seeds):
        rng = np.random.default_rng(ss)
        cdir = out / a["name"]
        cdir.mkdir(exist_ok=True)
        for j in range(spec.n_images_per_class):
            write_ppm(cdir / f"{j:03d}.ppm", render(a, spec, rng))
    manifest = {"generator": "pabn.synthetic", "version": 1, "params": asdict(spec), "classes": attrs}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def manifest_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def fine_grained_stats(images_by_class: dict[str, np.ndarray]) -> tuple[float, float]:
    """(mean pairwise distance between class mean colours, mean intra-class pixel variance).

    ``images_by_class`` maps a class to a stack of [n, 3, H, W] images in [0, 1].
    """
    means = []
    variances = []
    for stack in images_by_class.values():
        stack = np.asarray(stack, dtype=np.float64)
        means.append(stack.mean(axis=(0, 2, 3)))
        variances.append(stack.var(axis=0).mean())
    means = np.asarray(means)
    dist = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    n = len(means)
    inter = dist.sum() / (n * (n - 1))
    return float(inter), float(np.mean(variances))
