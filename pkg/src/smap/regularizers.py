"""Latent regularizers applied between encoder and decoder.

Three interchangeable operators share one contract (``ReguOutput``): hard
vector quantization with a straight-through gradient, diagonal-Gaussian
reparameterization with a KL penalty, and temperature-controlled soft
quantization against a codebook.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import autodiff as ad

Tensor = torch.Tensor

LOG_VAR_MIN, LOG_VAR_MAX = -30.0, 20.0
KINDS = ("vq", "kl", "softvq")


@dataclass
class ReguOutput:
    latents: Tensor
    aux_loss: Tensor
    indices: Tensor | None = None
    # per-token auxiliary terms, (..., K); lets callers average over a retained prefix
    token_aux: Tensor | None = None
    weights: Tensor | None = None


@dataclass
class GaussianPosterior:
    mu: Tensor
    log_var: Tensor

    @classmethod
    def from_moments(cls, moments: Tensor) -> "GaussianPosterior":
        mu, log_var = moments.chunk(2, dim=-1)
        return cls(mu, log_var)

    @property
    def clamped_log_var(self) -> Tensor:
        return self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)


class Codebook(nn.Module):
    def __init__(self, size: int, dim: int):
        super().__init__()
        if size < 2:
            raise ValueError(f"codebook needs at least 2 entries, got {size}")
        self.weight = nn.Parameter(torch.empty(size, dim).uniform_(-1.0 / size, 1.0 / size))

    @classmethod
    def from_entries(cls, entries: Tensor) -> "Codebook":
        cb = cls(entries.shape[0], entries.shape[1])
        with torch.no_grad():
            cb.weight.copy_(entries)
        cb.to(entries.dtype)
        return cb

    @property
    def size(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


def _entries(cb) -> Tensor:
    return cb.weight if isinstance(cb, Codebook) else cb


def squared_distances(z: Tensor, entries: Tensor) -> Tensor:
    """``d[..., i, j] = ||z_i - e_j||^2`` by direct differences (exact ties)."""
    if z.shape[-1] != entries.shape[-1]:
        raise ad.ShapeError(
            f"latent dim {z.shape[-1]} does not match codebook dim {entries.shape[-1]}"
        )
    return (z.unsqueeze(-2) - entries).pow(2).sum(-1)


class _StraightThrough(torch.autograd.Function):
    """Forward emits the codeword exactly; backward routes the gradient to ``z``."""

    @staticmethod
    def forward(ctx, z, e):
        return e.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def vq_quantize(z: Tensor, cb, beta: float = 0.25) -> ReguOutput:
    """Nearest-codeword quantization, straight-through backward.

    Ties resolve to the lowest index (``argmin`` returns the first minimum).
    """
    entries = _entries(cb)
    d = squared_distances(z.detach(), entries.detach())
    idx = d.argmin(dim=-1)
    e = entries[idx]
    codebook_term = (z.detach() - e).pow(2).sum(-1)
    commit_term = (z - e.detach()).pow(2).sum(-1)
    token_aux = codebook_term + beta * commit_term
    quantized = _StraightThrough.apply(z, e.detach())
    return ReguOutput(quantized, token_aux.mean(), idx, token_aux)


def kl_reparameterize(post: GaussianPosterior, noise: Tensor | None = None) -> ReguOutput:
    """``mu + exp(log_var / 2) * noise`` plus KL(q || N(0, I)) averaged over tokens.

    ``noise=None`` means the posterior mean (no sampling).
    """
    log_var = post.clamped_log_var
    if noise is None:
        latents = post.mu
    else:
        if noise.shape != post.mu.shape:
            raise ad.ShapeError(f"noise shape {tuple(noise.shape)} != mu shape {tuple(post.mu.shape)}")
        latents = post.mu + torch.exp(0.5 * log_var) * noise
    token_aux = 0.5 * (post.mu.pow(2) + log_var.exp() - 1.0 - log_var).sum(-1)
    return ReguOutput(latents, token_aux.mean(), None, token_aux)


def softvq_quantize(z: Tensor, cb, tau: float, entropy_weight: float = 0.0) -> ReguOutput:
    """Convex combination of codewords weighted by ``softmax(-||z - e||^2 / tau)``.

    With ``entropy_weight > 0`` the auxiliary loss rewards spreading the batch's
    average assignment over the codebook; it is zero otherwise.
    """
    if not tau > 0:
        raise ValueError(f"softvq temperature must be positive, got {tau}")
    entries = _entries(cb)
    d = squared_distances(z, entries)
    alpha = ad.softmax(-d / tau, axis=-1)
    latents = alpha @ entries
    token_aux = torch.zeros(alpha.shape[:-1], dtype=z.dtype, device=z.device)
    aux = token_aux.mean()
    if entropy_weight:
        usage = alpha.reshape(-1, alpha.shape[-1]).mean(0)
        aux = aux + entropy_weight * (usage * usage.clamp_min(1e-12).log()).sum()
    return ReguOutput(latents, aux, alpha.argmax(-1), token_aux, alpha)


def regu(kind: str, z: Tensor, *, codebook=None, beta: float = 0.25, tau: float = 1.0,
         noise: Tensor | None = None, entropy_weight: float = 0.0) -> ReguOutput:
    """Dispatch on ``kind`` in ``{"vq", "kl", "softvq"}``.

    For ``"kl"``, ``z`` holds concatenated ``[mu ; log_var]`` moments.
    """
    if kind == "vq":
        return vq_quantize(z, codebook, beta)
    if kind == "kl":
        return kl_reparameterize(GaussianPosterior.from_moments(z), noise)
    if kind == "softvq":
        return softvq_quantize(z, codebook, tau, entropy_weight)
    raise ValueError(f"unknown regularizer kind {kind!r}; expected one of {KINDS}")
