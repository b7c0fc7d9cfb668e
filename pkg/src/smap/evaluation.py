"""Toy-scale diagnostics: prefix sweeps, condition/latent swaps, pixel Fréchet proxy."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .tokenizer import SMAPTokenizer

PSNR_CAP = 99.0
CSV_HEADER = ("k", "mse", "psnr")


def _sig9(x: float) -> float:
    return float(f"{x:.9g}")


def psnr(mse: float, peak: float = 1.0) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak**2 / mse))


@dataclass
class EvalReport:
    """Per-prefix-length reconstruction quality plus optional swap/Fréchet summaries.

    Values are rounded to 9 significant digits on entry so the CSV form is exact.
    """

    rows: list[tuple[int, float, float]] = field(default_factory=list)
    cross_accuracy: float | None = None
    frechet: float | None = None

    def add(self, k: int, mse: float) -> None:
        self.rows.append((int(k), _sig9(mse), _sig9(psnr(mse))))

    @property
    def ks(self) -> list[int]:
        return [r[0] for r in self.rows]

    @property
    def mse(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for k, m, p in self.rows:
            w.writerow([k, f"{m:.9g}", f"{p:.9g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        rep = cls()
        for k, m, p in reader:
            rep.rows.append((int(k), float(m), float(p)))
        return rep


# --------------------------------------------------------------------------- classifier


def standardize(images: np.ndarray) -> np.ndarray:
    """Flatten and z-score each image so the classifier ignores contrast and offset."""
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    x = x - x.mean(axis=1, keepdims=True)
    return x / np.maximum(x.std(axis=1, keepdims=True), 1e-8)


@dataclass
class NearestClassMean:
    means: np.ndarray  # (classes, pixels) standardized
    raw_means: np.ndarray  # (classes, H, W, ch)

    @classmethod
    def fit(cls, images: np.ndarray, labels: np.ndarray) -> "NearestClassMean":
        classes = np.unique(labels)
        z = standardize(images)
        means = np.stack([z[labels == c].mean(0) for c in classes])
        raw = np.stack([np.asarray(images)[labels == c].mean(0) for c in classes])
        return cls(means, raw)

    def distances(self, images: np.ndarray) -> np.ndarray:
        z = standardize(images)
        return ((z[:, None, :] - self.means[None]) ** 2).sum(-1)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.distances(images).argmin(1)


def pixel_frechet(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Fréchet distance between diagonal Gaussians fitted to flattened pixels."""
    a = np.asarray(set_a, dtype=np.float64).reshape(len(set_a), -1)
    b = np.asarray(set_b, dtype=np.float64).reshape(len(set_b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("pixel_frechet needs two non-empty sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"image sizes differ: {a.shape[1]} vs {b.shape[1]} pixels")
    mu_a, mu_b = a.mean(0), b.mean(0)
    var_a, var_b = a.var(0), b.var(0)
    d = float(((mu_a - mu_b) ** 2).sum() + (var_a + var_b - 2.0 * np.sqrt(var_a * var_b)).sum())
    return max(d, 0.0)


# --------------------------------------------------------------------------- tokenizer sweeps


def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def _model_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def reconstruct_all(tokenizer: SMAPTokenizer, images: np.ndarray, labels: np.ndarray,
                    k: int, cond_labels: np.ndarray | None = None, batch: int = 256) -> np.ndarray:
    """Decode every image from its first ``k`` latents, optionally under other class conditions."""
    dtype = _model_dtype(tokenizer)
    cond_labels = labels if cond_labels is None else cond_labels
    out = []
    for sl in _batches(len(labels), batch):
        x = torch.as_tensor(images[sl], dtype=dtype)
        lat = tokenizer.latents(x, torch.as_tensor(labels[sl]))[:, :k]
        out.append(tokenizer.decode(lat, torch.as_tensor(cond_labels[sl])).double().numpy())
    return np.concatenate(out)


def eval_prefix_sweep(tokenizer: SMAPTokenizer, images: np.ndarray, labels: np.ndarray,
                      ks=None) -> tuple[EvalReport, dict[int, np.ndarray]]:
    """Mean MSE/PSNR for each retained prefix length; also returns the reconstructions."""
    ks = range(tokenizer.config.latent_count + 1) if ks is None else ks
    report, recons = EvalReport(), {}
    for k in ks:
        rec = reconstruct_all(tokenizer, images, labels, k)
        recons[int(k)] = rec
        report.add(k, float(((rec - images) ** 2).mean()))
    return report, recons


def cross_pairs(labels: np.ndarray, n_pairs: int, seed: int = 0) -> np.ndarray:
    """``(n_pairs, 2)`` index pairs ``(a, b)`` with ``labels[a] != labels[b]``."""
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n_pairs:
        a, b = rng.integers(0, len(labels), 2)
        if labels[a] != labels[b]:
            pairs.append((a, b))
    return np.array(pairs, dtype=np.int64)


@torch.no_grad()
def eval_cross_swap(tokenizer: SMAPTokenizer, images: np.ndarray, labels: np.ndarray,
                    pairs: np.ndarray, classifier: NearestClassMean) -> tuple[float, np.ndarray, np.ndarray]:
    """Decode ``(C from a, Z from b)`` for each pair and classify the result.

    Returns the fraction classified as ``a``'s class, the swapped
    reconstructions, and a grid whose rows are ``[image a | image b | swap]``.
    """
    a, b = pairs[:, 0], pairs[:, 1]
    k = tokenizer.config.latent_count
    swapped = reconstruct_all(tokenizer, images[b], labels[b], k, cond_labels=labels[a])
    acc = float((classifier.predict(swapped) == labels[a]).mean()) if len(pairs) else 0.0
    grid = image_grid([images[a], images[b], np.clip(swapped, 0.0, 1.0)])
    return acc, swapped, grid


def image_grid(columns: list[np.ndarray], pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Tile equally sized image stacks ``(n, H, W, ch)``: one column per stack."""
    n, H, W, ch = columns[0].shape
    cols = len(columns)
    grid = np.full((n * (H + pad) + pad, cols * (W + pad) + pad, ch), fill)
    for j, stack in enumerate(columns):
        for i in range(n):
            y, x = pad + i * (H + pad), pad + j * (W + pad)
            grid[y : y + H, x : x + W] = stack[i]
    return grid


def monotone_violations(values, rel_tol: float = 0.02) -> int:
    """Adjacent pairs where the curve rises by more than ``rel_tol`` relative."""
    v = list(values)
    return sum(1 for x, y in zip(v, v[1:]) if y > x * (1.0 + rel_tol))
