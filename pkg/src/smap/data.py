"""Synthetic four-class shapes dataset.

Class identity is the shape kind; position, size, foreground intensity and
background level are drawn independently of the class, so category-level
content and instance detail are separable by construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

CLASSES = ("disc", "square", "cross", "triangle")
SUPERSAMPLE = 4


@dataclass
class ShapesDataset:
    images: np.ndarray  # (n, H, W, 1) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    params: np.ndarray  # (n, 5): cx, cy, size, foreground, background
    seed: int
    test_fraction: float = 0.2

    @property
    def size(self) -> int:
        return self.images.shape[1]

    @property
    def num_classes(self) -> int:
        return len(CLASSES)

    def __len__(self) -> int:
        return len(self.labels)

    def is_test(self) -> np.ndarray:
        return np.array([held_out(self.seed, i, self.test_fraction) for i in range(len(self))])

    def split(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        """``(images, labels)`` of the ``"train"`` or ``"test"`` part."""
        mask = self.is_test()
        if part == "train":
            mask = ~mask
        elif part != "test":
            raise ValueError(f"unknown split {part!r}")
        return self.images[mask], self.labels[mask]


def held_out(seed: int, index: int, fraction: float = 0.2) -> bool:
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2.0**64 < fraction


def _coverage(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if kind == "disc":
        return u**2 + v**2 <= 0.85
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 1.0
    if kind == "cross":
        arm = 0.3
        return ((np.abs(u) <= arm) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= arm) & (np.abs(u) <= 1.0))
    if kind == "triangle":
        # apex up; image rows grow downward
        half_width = (v + 0.9) / 1.8
        return (v >= -0.9) & (v <= 0.9) & (np.abs(u) <= half_width)
    raise ValueError(f"unknown shape {kind!r}")


def render_shape(kind: str, size: int, cx: float, cy: float, scale: float,
                 foreground: float, background: float) -> np.ndarray:
    """Antialiased ``(size, size)`` raster by ``SUPERSAMPLE``-fold box filtering."""
    s = SUPERSAMPLE
    coords = (np.arange(size * s) + 0.5) / s
    x, y = np.meshgrid(coords, coords)
    cover = _coverage(kind, (x - cx) / scale, (y - cy) / scale).astype(np.float64)
    cover = cover.reshape(size, s, size, s).mean(axis=(1, 3))
    return background + (foreground - background) * cover


def make_shapes_dataset(seed: int = 0, n_per_class: int = 500, size: int = 32) -> ShapesDataset:
    """Balanced, deterministic dataset; samples are interleaved by class."""
    rng = np.random.default_rng(seed)
    n = n_per_class * len(CLASSES)
    labels = np.tile(np.arange(len(CLASSES)), n_per_class)
    centre = size / 2.0
    jitter = size / 16.0
    params = np.stack(
        [
            centre + rng.uniform(-jitter, jitter, n),
            centre + rng.uniform(-jitter, jitter, n),
            size * rng.uniform(0.25, 0.32, n),
            rng.uniform(0.6, 1.0, n),
            rng.uniform(0.0, 0.3, n),
        ],
        axis=1,
    )
    images = np.empty((n, size, size, 1))
    for i in range(n):
        cx, cy, sc, fg, bg = params[i]
        images[i, :, :, 0] = render_shape(CLASSES[labels[i]], size, cx, cy, sc, fg, bg)
    np.clip(images, 0.0, 1.0, out=images)
    return ShapesDataset(images, labels.astype(np.int64), params, seed)
