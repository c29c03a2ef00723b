"""Synthetic shape benchmark, weather-like corruptions, PNG ingestion and frame streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import DataError

CLASS_NAMES = ("disk", "square", "triangle", "cross")
CONDITIONS = ("clear", "rain", "fog", "snow")
_COND_ID = {c: i for i, c in enumerate(CONDITIONS)}
MIN_SIZE = 12

FOG_AIRLIGHT = 0.9


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: Optional[np.ndarray]  # (N,) int64, or None for an unlabeled set
    condition: str = "clear"
    class_names: tuple[str, ...] = CLASS_NAMES
    source: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values outside [0, 1]")
        if self.labels is None:
            return
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("label index out of range")

    def __len__(self) -> int:
        return len(self.images)

    def require_labels(self, purpose: str) -> np.ndarray:
        if self.labels is None:
            raise DataError(f"{purpose} needs labels for the {self.condition!r} set")
        return self.labels

    def subset(self, idx) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.condition, self.class_names, self.source)


# --------------------------------------------------------------------------- shapes


def _shape_mask(kind: int, yy, xx, cx, cy, r, theta) -> np.ndarray:
    # rotate coordinates into the shape frame
    c, s = np.cos(theta), np.sin(theta)
    u = c * (xx - cx) + s * (yy - cy)
    v = -s * (xx - cx) + c * (yy - cy)
    if kind == 0:
        return u * u + v * v <= r * r
    if kind == 1:
        half = 0.8 * r
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == 2:
        # upward triangle inscribed in radius r
        h = 1.5 * r
        top = -r
        bottom = top + h
        half_w = (v - top) / h * (np.sqrt(3) * r / 2 * 1.15)
        return (v >= top) & (v <= bottom) & (np.abs(u) <= half_w)
    bar = 0.3 * r
    return ((np.abs(u) <= bar) & (np.abs(v) <= r)) | ((np.abs(v) <= bar) & (np.abs(u) <= r))


def render_shape(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(0.15, 0.85, 3)
    fx, fy = rng.uniform(0.5, 2.0, 2) * 2 * np.pi / size
    phase = rng.uniform(0, 2 * np.pi, 2)
    texture = 0.06 * np.sin(fx * xx + phase[0]) * np.cos(fy * yy + phase[1])
    img = base[:, None, None] + texture[None] + rng.normal(0, 0.02, (3, size, size))

    color = rng.uniform(0.0, 1.0, 3)
    while abs(color.mean() - base.mean()) < 0.25:
        color = rng.uniform(0.0, 1.0, 3)
    r = rng.uniform(0.24, 0.36) * size
    margin = r + 1
    cx, cy = rng.uniform(margin, size - margin, 2)
    theta = rng.uniform(-np.pi / 10, np.pi / 10)
    mask = _shape_mask(kind, yy, xx, cx, cy, r, theta)
    img = np.where(mask[None], color[:, None, None], img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_shapes(num_per_class: int, classes: int = 4, size: int = 32, seed: int = 0,
                    condition: str = "clear") -> Dataset:
    """Labeled clear-condition shapes; item ``i`` has class ``i % classes`` and depends only on (seed, i)."""
    if size < MIN_SIZE:
        raise DataError(f"image size {size} too small for shapes (minimum {MIN_SIZE})")
    if not 1 <= classes <= len(CLASS_NAMES):
        raise DataError(f"classes must be in 1..{len(CLASS_NAMES)}")
    n = num_per_class * classes
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.arange(n) % classes
    for i in range(n):
        images[i] = render_shape(int(labels[i]), size, np.random.default_rng([seed, i]))
    return Dataset(images, labels, condition, CLASS_NAMES[:classes], f"shapes(seed={seed})")


# --------------------------------------------------------------------------- corruptions


def _fog(img, intensity, rng):
    t = 1.0 - 0.8 * intensity
    out = t * img + (1.0 - t) * FOG_AIRLIGHT
    sigma = 0.7 * intensity
    if sigma > 0:
        out = gaussian_filter(out, sigma=(0, sigma, sigma), mode="nearest")
    return out


def _rain(img, intensity, rng):
    c, h, w = img.shape
    out = img * (1.0 - 0.5 * intensity)
    n_streaks = int(round(intensity * 0.05 * h * w))
    if n_streaks == 0:
        return out
    layer = np.zeros((h, w))
    angle = np.deg2rad(rng.uniform(60, 80))
    for _ in range(n_streaks):
        length = rng.integers(h // 6, h // 3 + 1)
        x0, y0 = rng.uniform(0, w), rng.uniform(-length / 2, h)
        a = angle + rng.normal(0, 0.05)
        steps = np.arange(length)
        xs = np.round(x0 + steps * np.cos(a)).astype(int)
        ys = np.round(y0 + steps * np.sin(a)).astype(int)
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        layer[ys[ok], xs[ok]] = np.maximum(layer[ys[ok], xs[ok]], rng.uniform(0.6, 1.0))
    alpha = 0.85 * intensity * layer
    return out * (1 - alpha) + 0.95 * alpha


def _snow(img, intensity, rng):
    c, h, w = img.shape
    whiten = 0.5 * intensity
    out = img * (1 - whiten) + 0.95 * whiten
    density = 0.05 * intensity
    flakes = rng.random((h, w)) < density
    big = rng.random((h, w)) < density * 0.3
    big = big | np.roll(big, 1, axis=0) | np.roll(big, 1, axis=1) | np.roll(np.roll(big, 1, axis=0), 1, axis=1)
    mask = flakes | big
    bright = rng.uniform(0.85, 1.0, (h, w))
    return np.where(mask[None], bright[None], out)


_CORRUPTIONS = {"fog": _fog, "rain": _rain, "snow": _snow}


def corrupt(image: np.ndarray, condition: str, intensity: float, seed: int = 0) -> np.ndarray:
    """Apply a procedural weather-like corruption to a (C, H, W) image in [0, 1].

    Intensity 0 is the identity for every condition; ``clear`` is always the identity.
    """
    if not 0.0 <= intensity <= 1.0:
        raise ValueError(f"intensity must be in [0, 1], got {intensity}")
    if condition not in _COND_ID:
        raise DataError(f"unknown condition {condition!r}")
    image = np.asarray(image, dtype=np.float32)
    if condition == "clear" or intensity == 0:
        return image.copy()
    rng = np.random.default_rng([seed, _COND_ID[condition]])
    out = _CORRUPTIONS[condition](image.astype(np.float64), intensity, rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def corrupt_dataset(ds: Dataset, condition: str, intensity: float, seed: int = 0) -> Dataset:
    out = np.empty_like(ds.images)
    for i, img in enumerate(ds.images):
        out[i] = corrupt(img, condition, intensity, seed=seed * 1_000_003 + i)
    labels = None if ds.labels is None else ds.labels.copy()
    return Dataset(out, labels, condition, ds.class_names, f"{ds.source}+{condition}@{intensity}")


# --------------------------------------------------------------------------- PNG directories


def save_directory_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    for name in ds.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, (img, label) in enumerate(zip(ds.images, ds.require_labels("saving by class"))):
        arr = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(root / ds.class_names[label] / f"{i:06d}.png")


def load_directory_dataset(path, class_names: Sequence[str] = CLASS_NAMES, condition: str = "clear",
                           size: Optional[tuple[int, int]] = None) -> Dataset:
    """Read ``root/<class-name>/*.png`` (8-bit RGB) into a dataset with linear [0, 1] pixels."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    known = {name: i for i, name in enumerate(class_names)}
    images, labels = [], []
    subdirs = {p.name: p for p in root.iterdir() if p.is_dir()}
    for name in sorted(subdirs):
        if name not in known:
            raise DataError(f"unknown class directory {subdirs[name]}")
    # class-index order, then file name
    for sub in sorted(subdirs.values(), key=lambda p: known[p.name]):
        for f in sorted(sub.glob("*.png")):
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except OSError as exc:
                raise DataError(f"unreadable image {f}: {exc}") from exc
            if size is None:
                size = arr.shape[:2]
            if arr.shape[:2] != tuple(size):
                raise DataError(f"image {f} has size {arr.shape[:2]}, expected {tuple(size)}")
            images.append(arr.transpose(2, 0, 1))
            labels.append(known[sub.name])
    if not images:
        raise DataError(f"no PNG images under {root}")
    return Dataset(np.stack(images), np.array(labels), condition, tuple(class_names), str(root))


# --------------------------------------------------------------------------- streams


@dataclass
class StreamSpec:
    segments: list[tuple[str, int]]
    seed: int = 0

    def __post_init__(self):
        self.segments = [(str(c), int(n)) for c, n in self.segments]
        for cond, n in self.segments:
            if n < 1:
                raise DataError(f"segment {cond!r} has {n} frames; need at least 1")


@dataclass
class Stream:
    images: np.ndarray
    labels: np.ndarray
    conditions: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


def make_stream(spec: StreamSpec, datasets: Mapping[str, Dataset]) -> Stream:
    """Concatenate segments, drawing frames with replacement from each condition's test set."""
    rng = np.random.default_rng(spec.seed)
    images, labels, conds = [], [], []
    for cond, n in spec.segments:
        if cond not in datasets:
            raise DataError(f"stream references unknown condition {cond!r}")
        ds = datasets[cond]
        if len(ds) == 0:
            raise DataError(f"condition {cond!r} has no frames to draw from")
        idx = rng.integers(0, len(ds), n)
        images.append(ds.images[idx])
        labels.append(ds.require_labels("a stream")[idx])
        conds += [cond] * n
    return Stream(np.concatenate(images), np.concatenate(labels), conds)
