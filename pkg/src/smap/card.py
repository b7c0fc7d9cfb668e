"""Causal autoregressive backbone with a flow-matching MLP head.

The backbone reads ``[begin ; z_1 .. z_{K-1}]`` under a causal mask and emits
one context vector per position; the head turns ``(x_t, t, context, class)``
into a velocity for that token. Sampling integrates the velocity field with
Euler steps from noise (t=0) to data (t=1), one token at a time.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import autodiff as ad
from .transformer import AdaLNBlock, BlockConfig, LayerNorm, Linear, causal_mask, modulate, sinusoidal_time_embed

Tensor = torch.Tensor


class ConditionMode(str, enum.Enum):
    """Where the generator's class condition comes from.

    ``SHARED`` reuses the tokenizer's class table; ``INDEPENDENT`` learns a
    fresh table; ``RECON_ONLY`` is ``INDEPENDENT`` on top of a tokenizer trained
    without semantic injection.
    """

    SHARED = "shared"
    INDEPENDENT = "independent"
    RECON_ONLY = "recon_only"


@dataclass(frozen=True)
class CardConfig:
    depth: int = 4
    width: int = 128
    heads: int = 4
    mlp_ratio: float = 2.0
    head_blocks: int = 2
    head_width: int = 256
    token_count: int = 8
    latent_dim: int = 16
    cond_dim: int = 128
    num_classes: int = 4
    time_dim: int = 256
    steps: int = 25
    cfg_scale: float = 2.7
    class_dropout: float = 0.1
    condition_mode: str = "shared"
    freeze_condition: bool = True

    def __post_init__(self):
        for name in ("width", "heads", "head_width", "token_count", "latent_dim", "cond_dim",
                     "num_classes", "time_dim", "steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.depth < 0 or self.head_blocks < 0:
            raise ValueError("depth and head_blocks must be non-negative")
        if self.time_dim % 2:
            raise ValueError(f"time_dim must be even, got {self.time_dim}")
        if not 0.0 <= self.class_dropout <= 1.0:
            raise ValueError(f"class_dropout must lie in [0, 1], got {self.class_dropout}")
        ConditionMode(self.condition_mode)
        BlockConfig(self.depth, self.width, self.heads, self.mlp_ratio)

    @property
    def mode(self) -> ConditionMode:
        return ConditionMode(self.condition_mode)

    @property
    def null_class(self) -> int:
        return self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)


class HeadBlock(nn.Module):
    """Residual MLP block modulated by (shift, scale, gate) from the fused condition."""

    def __init__(self, width: int):
        super().__init__()
        self.norm = LayerNorm(width, affine=False)
        self.ada = Linear(width, 3 * width, zero=True)
        self.fc1 = Linear(width, width)
        self.fc2 = Linear(width, width)

    def forward(self, x, c):
        shift, scale, gate = self.ada(F.silu(c)).chunk(3, dim=-1)
        h = modulate(self.norm(x), scale, shift)
        return x + gate * self.fc2(F.silu(self.fc1(h)))


class VelocityHead(nn.Module):
    def __init__(self, latent_dim: int, context_dim: int, cond_dim: int, width: int,
                 blocks: int, time_dim: int):
        super().__init__()
        self.time_dim = time_dim
        self.x_in = Linear(latent_dim, width)
        self.time_in = Linear(time_dim, width)
        self.time_out = Linear(width, width)
        self.context_in = Linear(context_dim, width)
        self.cond_in = Linear(cond_dim, width)
        self.blocks = nn.ModuleList(HeadBlock(width) for _ in range(blocks))
        self.final_norm = LayerNorm(width, affine=False)
        self.final_ada = Linear(width, 2 * width, zero=True)
        self.out = Linear(width, latent_dim, zero=True)

    def forward(self, x_t: Tensor, t: Tensor, h: Tensor, cond: Tensor) -> Tensor:
        temb = sinusoidal_time_embed(t, self.time_dim).to(x_t.dtype)
        c = self.time_out(F.silu(self.time_in(temb))) + self.context_in(h) + self.cond_in(cond)
        x = self.x_in(x_t)
        for blk in self.blocks:
            x = blk(x, c)
        shift, scale = self.final_ada(F.silu(c)).chunk(2, dim=-1)
        return self.out(modulate(self.final_norm(x), scale, shift))


def flow_interpolate(x0: Tensor, noise: Tensor, t: Tensor) -> tuple[Tensor, Tensor]:
    """``x_t = (1 - t) * noise + t * x0`` and the target velocity ``x0 - noise``."""
    tt = t[..., None]
    return (1 - tt) * noise + tt * x0, x0 - noise


def euler_sample(field: Callable[[Tensor, float], Tensor], x0: Tensor, steps: int) -> Tensor:
    """Integrate ``dx/dt = field(x, t)`` from t=0 to t=1 with ``steps`` Euler steps."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = x0
    dt = 1.0 / steps
    for i in range(steps):
        x = x + dt * field(x, i * dt)
    return x


def guided(v_cond: Tensor, v_null: Tensor, scale: float) -> Tensor:
    # (1 - s) * v_null + s * v_cond: equals v_null + s * (v_cond - v_null), and is
    # bitwise v_cond at s=1 and v_null at s=0
    return (1.0 - scale) * v_null + scale * v_cond


class CARD(nn.Module):
    def __init__(self, config: CardConfig, class_table: Tensor | None = None):
        super().__init__()
        self.config = c = config
        D = c.width
        shape = (c.num_classes + 1, c.cond_dim)
        if c.mode is ConditionMode.SHARED:
            if class_table is None:
                raise ValueError("shared condition mode needs the tokenizer's class table")
            if tuple(class_table.shape) != shape:
                raise ValueError(f"class table shape {tuple(class_table.shape)} != {shape}")
            table = class_table.detach().clone()
        else:
            table = torch.randn(shape) * 0.02
        self.class_table = nn.Parameter(table, requires_grad=not (c.mode is ConditionMode.SHARED and c.freeze_condition))

        self.token_in = Linear(c.latent_dim, D)
        self.begin = nn.Parameter(torch.randn(D) * 0.02)
        self.pos = nn.Parameter(torch.randn(c.token_count, D) * 0.02)
        self.cond_proj = Linear(c.cond_dim, D)
        self.blocks = nn.ModuleList(AdaLNBlock(D, c.heads, c.mlp_ratio) for _ in range(c.depth))
        self.norm = LayerNorm(D)
        self.head = VelocityHead(c.latent_dim, D, c.cond_dim, c.head_width, c.head_blocks, c.time_dim)
        # affine map from tokenizer latents to the unit-scale space the flow runs in
        self.register_buffer("latent_shift", torch.zeros(c.latent_dim))
        self.register_buffer("latent_scale", torch.ones(c.latent_dim))

    # ------------------------------------------------------------------ conditioning

    def condition(self, class_ids) -> Tensor:
        ids = torch.as_tensor(class_ids, dtype=torch.long).reshape(-1)
        if int(ids.min()) < 0 or int(ids.max()) > self.config.num_classes:
            raise ValueError(f"class id out of range [0, {self.config.num_classes}]")
        return ad.embedding(ids, self.class_table)

    def set_normalization(self, latents: Tensor) -> None:
        """Fit per-channel shift/scale so training latents are roughly unit Gaussian."""
        flat = latents.reshape(-1, latents.shape[-1]).to(self.latent_shift.dtype)
        with torch.no_grad():
            self.latent_shift.copy_(flat.mean(0))
            self.latent_scale.copy_(flat.std(0).clamp_min(1e-6))

    def normalize(self, z: Tensor) -> Tensor:
        return (z - self.latent_shift) / self.latent_scale

    def denormalize(self, x: Tensor) -> Tensor:
        return x * self.latent_scale + self.latent_shift

    # ------------------------------------------------------------------ model pieces

    def ar_contexts(self, tokens: Tensor, cond: Tensor) -> Tensor:
        """``(B, K, d)`` teacher-forced tokens -> ``(B, K, D)`` contexts.

        Row ``i`` is computed from the begin token and tokens ``< i`` only.
        """
        c = self.config
        if tokens.shape[-2:] != (c.token_count, c.latent_dim):
            raise ad.ShapeError(
                f"expected tokens (B, {c.token_count}, {c.latent_dim}), got {tuple(tokens.shape)}"
            )
        B = tokens.shape[0]
        prev = self.token_in(tokens[:, : c.token_count - 1])
        x = ad.concat([self.begin.expand(B, 1, -1), prev], axis=1) + self.pos
        cvec = self.cond_proj(cond)
        mask = causal_mask(c.token_count)
        for blk in self.blocks:
            x = blk(x, cvec, mask)
        return self.norm(x)

    def velocity(self, x_t: Tensor, t, h: Tensor, cond: Tensor) -> Tensor:
        t = torch.as_tensor(t, dtype=x_t.dtype)
        if t.dim() == 0:
            t = t.expand(x_t.shape[:-1])
        return self.head(x_t, t, h, cond)

    def flow_matching_loss(self, x0: Tensor, h: Tensor, cond: Tensor, rng: torch.Generator | None = None,
                           t: Tensor | None = None, noise: Tensor | None = None) -> Tensor:
        """Mean over tokens of ``||v(x_t, t) - (x0 - noise)||^2``.

        ``t ~ U(0, 1)`` and ``noise ~ N(0, I)`` are drawn from ``rng`` unless given.
        ``cond`` is broadcast over the token axis when it has one fewer dims.
        """
        lead = x0.shape[:-1]
        if t is None:
            t = torch.rand(lead, generator=rng).to(x0.dtype)
        if noise is None:
            noise = torch.randn(x0.shape, generator=rng).to(x0.dtype)
        x_t, target = flow_interpolate(x0, noise, t)
        if cond.dim() < h.dim():
            cond = cond.unsqueeze(-2).expand(*h.shape[:-1], cond.shape[-1])
        v = self.velocity(x_t, t, h, cond)
        return (v - target).pow(2).sum(-1).mean()

    def training_loss(self, latents: Tensor, class_ids, rng: torch.Generator) -> Tensor:
        """Teacher-forced loss on raw tokenizer latents ``(B, K, d)``."""
        x0 = self.normalize(latents)
        cond = self.condition(class_ids)
        h = self.ar_contexts(x0, cond)
        return self.flow_matching_loss(x0, h, cond, rng)

    # ------------------------------------------------------------------ sampling

    def sample_token(self, h_cond: Tensor, h_null: Tensor, cond_c: Tensor, cond_null: Tensor,
                     steps: int, cfg_scale: float, rng: torch.Generator | None = None,
                     x0: Tensor | None = None) -> Tensor:
        """Guided Euler integration for one token position; returns x(1) in normalized space."""
        if x0 is None:
            x0 = torch.randn(*h_cond.shape[:-1], self.config.latent_dim, generator=rng).to(h_cond.dtype)

        def field(x, t):
            v_c = self.velocity(x, t, h_cond, cond_c)
            v_n = self.velocity(x, t, h_null, cond_null)
            return guided(v_c, v_n, cfg_scale)

        return euler_sample(field, x0, steps)

    @torch.no_grad()
    def generate(self, class_ids, rng: torch.Generator, steps: int | None = None,
                 cfg_scale: float | None = None) -> Tensor:
        """Sample ``(B, K, d)`` tokenizer latents for each class id, in token order."""
        c = self.config
        steps = c.steps if steps is None else steps
        cfg_scale = c.cfg_scale if cfg_scale is None else cfg_scale
        ids = torch.as_tensor(class_ids, dtype=torch.long).reshape(-1)
        B = ids.shape[0]
        dtype = self.pos.dtype
        cond_c = self.condition(ids)
        cond_n = self.condition(torch.full_like(ids, c.null_class))
        tokens = torch.zeros(B, c.token_count, c.latent_dim, dtype=dtype)
        for i in range(c.token_count):
            both = self.ar_contexts(torch.cat([tokens, tokens]), torch.cat([cond_c, cond_n]))
            h_c, h_n = both[:B, i], both[B:, i]
            tokens[:, i] = self.sample_token(h_c, h_n, cond_c, cond_n, steps, cfg_scale, rng)
        return self.denormalize(tokens)


def param_count(c: CardConfig) -> int:
    """Analytic parameter total of ``CARD(c)`` (buffers excluded)."""
    D, W, d, K, C = c.width, c.head_width, c.latent_dim, c.token_count, c.cond_dim
    hid = int(D * c.mlp_ratio)

    def linear(i, o):
        return i * o + o

    n = (c.num_classes + 1) * C  # class table
    n += linear(d, D) + D + K * D + linear(C, D)  # token_in, begin, pos, cond_proj
    block = linear(D, 3 * D) + linear(D, D) + linear(D, hid) + linear(hid, D) + linear(D, 6 * D)
    n += c.depth * block + 2 * D  # blocks + final affine norm
    n += linear(d, W) + linear(c.time_dim, W) + linear(W, W) + linear(D, W) + linear(C, W)
    n += c.head_blocks * (linear(W, 3 * W) + 2 * linear(W, W))
    n += linear(W, 2 * W) + linear(W, d)
    return n
