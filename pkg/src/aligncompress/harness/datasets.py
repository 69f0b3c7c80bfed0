"""Desk-scale synthetic datasets: Gaussian blobs and ellipse segmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import rng as rngmod
from ..errors import DomainError


@dataclass
class Dataset:
    name: str
    task: str  # "classification" | "segmentation"
    train_inputs: np.ndarray
    train_labels: np.ndarray
    eval_inputs: np.ndarray
    eval_labels: np.ndarray
    num_classes: int
    seed: int
    class_counts: list = field(default_factory=list)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.train_inputs.shape[1:])

    @property
    def train(self):
        return self.train_inputs, self.train_labels

    @property
    def eval(self):
        return self.eval_inputs, self.eval_labels

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a).tobytes() for a in
                        (self.train_inputs, self.train_labels, self.eval_inputs, self.eval_labels))


def class_means(C: int, dim: int) -> np.ndarray:
    """Class centres evenly spaced on the unit circle of the first two dims."""
    ang = 2.0 * np.pi * np.arange(C) / C
    means = np.zeros((C, dim))
    means[:, 0] = np.cos(ang)
    if dim > 1:
        means[:, 1] = np.sin(ang)
    return means


def _draw_blobs(gen, means, counts, spread):
    xs, ys = [], []
    for c, n in enumerate(counts):
        xs.append(means[c] + spread * gen.standard_normal((n, means.shape[1])))
        ys.append(np.full(n, c, dtype=np.int64))
    X = np.concatenate(xs)
    y = np.concatenate(ys)
    perm = gen.permutation(len(y))
    return X[perm], y[perm]


def gen_blobs(C: int, n_per_class, dim: int = 2, spread: float = 0.25, seed: int = 0,
              n_eval_per_class=None, name: str = "blobs") -> Dataset:
    """Gaussian clusters, one per class; train and eval are independent draws.

    ``n_per_class`` is an int or one count per class (unequal counts give an
    imbalanced set); ``n_eval_per_class`` defaults to the same counts.
    """
    if C < 2:
        raise DomainError(f"need at least 2 classes, got {C}")
    counts = [int(n_per_class)] * C if np.isscalar(n_per_class) else [int(n) for n in n_per_class]
    if len(counts) != C or min(counts) < 1:
        raise DomainError(f"need {C} positive class counts, got {counts}")
    eval_counts = counts if n_eval_per_class is None else (
        [int(n_eval_per_class)] * C if np.isscalar(n_eval_per_class) else list(n_eval_per_class))
    means = class_means(C, dim)
    Xtr, ytr = _draw_blobs(rngmod.stream(seed, "dataset/train"), means, counts, spread)
    Xev, yev = _draw_blobs(rngmod.stream(seed, "dataset/eval"), means, eval_counts, spread)
    return Dataset(name, "classification", Xtr, ytr, Xev, yev, C, seed, counts)


def rasterize_ellipse(H: int, W: int, cy: float, cx: float, ry: float, rx: float,
                      theta: float = 0.0) -> np.ndarray:
    """Boolean mask of pixel centres inside a rotated ellipse."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _draw_seg(gen, n, H, W, noise, max_ellipses):
    images = np.empty((n, 1, H, W))
    masks = np.zeros((n, H, W), dtype=np.int64)
    shapes = []
    for i in range(n):
        img = noise * gen.standard_normal((H, W))
        k = int(gen.integers(0, max_ellipses + 1))
        drawn = []
        for _ in range(k):
            cy, cx = gen.uniform(2, H - 2), gen.uniform(2, W - 2)
            ry, rx = gen.uniform(1.5, H / 4), gen.uniform(1.5, W / 4)
            theta = gen.uniform(0, np.pi)
            level = gen.uniform(0.6, 1.2)
            inside = rasterize_ellipse(H, W, cy, cx, ry, rx, theta)
            img[inside] += level
            masks[i][inside] = 1
            drawn.append((cy, cx, ry, rx, theta))
        images[i, 0] = img
        shapes.append(drawn)
    return images, masks, shapes


def gen_seg_blobs(n_images: int, H: int = 16, W: int = 16, seed: int = 0, noise: float = 0.35,
                  max_ellipses: int = 3, n_eval: int | None = None,
                  name: str = "seg_blobs") -> Dataset:
    """Noisy grayscale images with 0-3 bright ellipses; labels mark their interiors."""
    if H < 8 or W < 8:
        raise DomainError(f"images must be at least 8x8, got {H}x{W}")
    n_eval = n_images if n_eval is None else n_eval
    Xtr, ytr, _ = _draw_seg(rngmod.stream(seed, "dataset/train"), n_images, H, W, noise, max_ellipses)
    Xev, yev, _ = _draw_seg(rngmod.stream(seed, "dataset/eval"), n_eval, H, W, noise, max_ellipses)
    counts = np.bincount(ytr.reshape(-1), minlength=2).tolist()
    return Dataset(name, "segmentation", Xtr, ytr, Xev, yev, 2, seed, counts)
