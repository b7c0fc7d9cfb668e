"""Transformer blocks shared by the tokenizer and the generator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from . import autodiff as ad

Tensor = torch.Tensor


@dataclass(frozen=True)
class BlockConfig:
    depth: int
    width: int
    heads: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 0 or self.width <= 0 or self.heads <= 0 or self.mlp_ratio < 0:
            raise ValueError(f"invalid block config {self}")
        if self.mlp_ratio == 0 and self.depth > 0:
            raise ValueError("mlp_ratio must be positive when there are blocks")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def hidden(self) -> int:
        return int(self.width * self.mlp_ratio)


# --------------------------------------------------------------------------- masks


def check_mask(allowed: Tensor) -> Tensor:
    if allowed.dtype != torch.bool:
        raise TypeError("attention mask must be boolean")
    if not bool(allowed.any(dim=-1).all()):
        raise ValueError("attention mask has a query row with no allowed key")
    return allowed


def causal_mask(n: int) -> Tensor:
    """``allowed[i, j] = j <= i``."""
    return torch.ones(n, n, dtype=torch.bool).tril()


def prefix_mask(num_fixed: int, latent_count: int, k: int) -> Tensor:
    """Dense mask over ``[fixed positions ; latents 1..K]`` keeping latents ``1..k``.

    Dropped latents are never attended to, so they cannot influence any other
    position. Their own query rows still see the fixed block; those outputs
    are discarded by callers.
    """
    if not 0 <= k <= latent_count:
        raise ValueError(f"prefix length {k} outside [0, {latent_count}]")
    keys = torch.ones(num_fixed + latent_count, dtype=torch.bool)
    keys[num_fixed + k :] = False
    return check_mask(keys.expand(num_fixed + latent_count, -1).clone())


def prefix_key_mask(num_fixed: int, latent_count: int, ks: Tensor) -> Tensor:
    """Batched key mask ``(B, 1, S)`` for per-sample prefix lengths ``ks``."""
    pos = torch.arange(latent_count)
    latent_keep = pos[None, :] < ks[:, None]
    fixed = torch.ones(ks.shape[0], num_fixed, dtype=torch.bool)
    return torch.cat([fixed, latent_keep], dim=1)[:, None, :]


# --------------------------------------------------------------------------- layers


class Linear(nn.Linear):
    """``nn.Linear`` with truncated-normal init (std 0.02) and zero bias."""

    def __init__(self, fan_in: int, fan_out: int, bias: bool = True, zero: bool = False):
        super().__init__(fan_in, fan_out, bias=bias)
        if zero:
            nn.init.zeros_(self.weight)
        else:
            nn.init.trunc_normal_(self.weight, std=0.02)
        if self.bias is not None:
            nn.init.zeros_(self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        if affine:
            self.weight = nn.Parameter(torch.ones(dim))
            self.bias = nn.Parameter(torch.zeros(dim))
        else:
            self.register_parameter("weight", None)
            self.register_parameter("bias", None)

    def forward(self, x):
        return ad.layer_norm(x, self.weight, self.bias, self.eps)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = Linear(width, 3 * width)
        self.proj = Linear(width, width)

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        """``x``: (..., S, D). ``mask``: boolean, broadcastable to (..., S, S)."""
        *lead, s, d = x.shape
        qkv = self.qkv(x).reshape(*lead, s, 3, self.heads, self.head_dim)
        q, k, v = qkv.unbind(dim=-3)
        # (..., heads, S, head_dim)
        q, k, v = (t.transpose(-3, -2) for t in (q, k, v))
        logits = ad.matmul(q, k.transpose(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            if mask.dim() >= 3:
                mask = mask.unsqueeze(-3)
            logits = logits.masked_fill(~mask, float("-inf"))
        weights = ad.softmax(logits, axis=-1)
        out = ad.matmul(weights, v).transpose(-3, -2).reshape(*lead, s, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, width: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = Linear(width, hidden)
        self.fc2 = Linear(hidden, out or width)

    def forward(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


def multi_head_attention(x: Tensor, mask: Tensor | None, params: Attention) -> Tensor:
    if mask is not None and mask.dim() == 2:
        check_mask(mask)
        if mask.shape != (x.shape[-2], x.shape[-2]):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match sequence length {x.shape[-2]}")
    return params(x, mask)


class Block(nn.Module):
    """Pre-norm residual transformer block."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = LayerNorm(width)
        self.attn = Attention(width, heads)
        self.norm2 = LayerNorm(width)
        self.mlp = Mlp(width, int(width * mlp_ratio))

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


def modulate(h: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    return h * (1 + scale) + shift


class AdaLNBlock(nn.Module):
    """Pre-norm block whose norms are modulated by a condition vector.

    The (scale, shift, gate) projection starts at zero so the block is the
    identity map at initialization.
    """

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0, cond_dim: int | None = None):
        super().__init__()
        self.norm1 = LayerNorm(width, affine=False)
        self.attn = Attention(width, heads)
        self.norm2 = LayerNorm(width, affine=False)
        self.mlp = Mlp(width, int(width * mlp_ratio))
        self.ada = Linear(cond_dim or width, 6 * width, zero=True)

    def forward(self, x: Tensor, cond: Tensor, mask=None) -> Tensor:
        """``x``: (B, S, D) or (S, D); ``cond``: (B, C) or (C,)."""
        mod = self.ada(nn.functional.silu(cond)).unsqueeze(-2)
        s1, b1, g1, s2, b2, g2 = mod.chunk(6, dim=-1)
        x = x + g1 * self.attn(modulate(self.norm1(x), s1, b1), mask)
        return x + g2 * self.mlp(modulate(self.norm2(x), s2, b2))


def adaln_block(x: Tensor, cond: Tensor, mask: Tensor | None, params: AdaLNBlock) -> Tensor:
    return params(x, cond, mask)


def sinusoidal_time_embed(t, dim: int, max_period: float = 10000.0, scale: float = 1000.0) -> Tensor:
    """Interleaved ``[sin, cos, sin, cos, ...]`` features of ``scale * t``.

    ``t`` may be a float or a tensor of shape (B,); the result has a trailing
    axis of size ``dim``.
    """
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64 if not torch.is_tensor(t) else t.dtype)
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.dtype)
    args = (scale * t)[..., None] * freqs
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).flatten(-2)
