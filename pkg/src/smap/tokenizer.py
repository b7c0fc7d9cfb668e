"""Semantic-aware prefix tokenizer.

Encoder input is ``[patch tokens ; class condition ; latent queries]`` and only
the latent-query outputs are kept. The decoder sees
``[mask tokens ; class condition ; regularized latent prefix]`` and the image is
read off the mask-token outputs. During training the latent sequence is cut
to a random prefix length so the condition and the first few tokens have to
carry the global content.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from . import autodiff as ad
from .regularizers import KINDS, Codebook, ReguOutput, regu
from .transformer import Block, BlockConfig, LayerNorm, Linear, prefix_key_mask

Tensor = torch.Tensor


@dataclass(frozen=True)
class TokenizerConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 1
    width: int = 128
    latent_count: int = 8
    condition_count: int = 1
    num_classes: int = 4
    regu: str = "kl"
    latent_dim: int = 16
    codebook_size: int = 256
    tau: float = 0.1
    beta: float = 0.25
    kl_weight: float = 1e-4
    aux_weight: float = 1.0
    softvq_entropy: float = 0.0
    enc_depth: int = 4
    dec_depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    tail_drop: bool = True
    # False gives the reconstruction-only baseline: every image is paired with the null row
    semantic: bool = True

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} must be a positive multiple of patch_size {self.patch_size}"
            )
        if self.latent_count < 1:
            raise ValueError(f"latent_count must be >= 1 (K >= 1), got {self.latent_count}")
        if self.condition_count < 1:
            raise ValueError(f"condition_count must be >= 1 (N >= 1), got {self.condition_count}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.regu not in KINDS:
            raise ValueError(f"regu must be one of {KINDS}, got {self.regu!r}")
        if self.regu in ("vq", "softvq") and self.codebook_size < 2:
            raise ValueError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        BlockConfig(self.enc_depth, self.width, self.heads, self.mlp_ratio)
        BlockConfig(self.dec_depth, self.width, self.heads, self.mlp_ratio)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def null_class(self) -> int:
        return self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)


def sample_prefix_length(rng: torch.Generator, latent_count: int, size: int | None = None):
    """Draw ``k ~ Unif{0, ..., K}``; a tensor of ``size`` draws, or an int."""
    if latent_count < 1:
        raise ValueError("latent_count must be >= 1")
    shape = (1,) if size is None else (size,)
    k = torch.randint(0, latent_count + 1, shape, generator=rng)
    return int(k[0]) if size is None else k


class SMAPTokenizer(nn.Module):
    def __init__(self, config: TokenizerConfig):
        super().__init__()
        self.config = c = config
        D = c.width
        self.patch_embed = Linear(c.patch_dim, D)
        self.patch_pos = nn.Parameter(torch.randn(c.num_patches, D) * 0.02)
        self.latent_queries = nn.Parameter(torch.randn(c.latent_count, D) * 0.02)
        # last row is the null class
        self.class_table = nn.Parameter(torch.randn(c.num_classes + 1, c.condition_count * D) * 0.02)
        self.encoder = nn.ModuleList(Block(D, c.heads, c.mlp_ratio) for _ in range(c.enc_depth))
        self.enc_norm = LayerNorm(D)
        moments = 2 * c.latent_dim if c.regu == "kl" else c.latent_dim
        self.to_latent = Linear(D, moments)
        self.codebook = Codebook(c.codebook_size, c.latent_dim) if c.regu != "kl" else None
        self.from_latent = Linear(c.latent_dim, D)
        self.mask_tokens = nn.Parameter(torch.randn(c.num_patches, D) * 0.02)
        self.dec_latent_pos = nn.Parameter(torch.randn(c.latent_count, D) * 0.02)
        self.decoder = nn.ModuleList(Block(D, c.heads, c.mlp_ratio) for _ in range(c.dec_depth))
        self.dec_norm = LayerNorm(D)
        self.to_pixels = Linear(D, c.patch_dim)

    # ------------------------------------------------------------------ helpers

    def patchify(self, images: Tensor) -> Tensor:
        c = self.config
        B, H, W, ch = images.shape
        if (H, W, ch) != (c.image_size, c.image_size, c.channels):
            raise ad.ShapeError(
                f"expected images of shape (B, {c.image_size}, {c.image_size}, {c.channels}), "
                f"got {tuple(images.shape)}"
            )
        g, f = c.grid, c.patch_size
        x = images.reshape(B, g, f, g, f, ch).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, f * f * ch)

    def unpatchify(self, patches: Tensor) -> Tensor:
        c = self.config
        B = patches.shape[0]
        g, f, ch = c.grid, c.patch_size, c.channels
        x = patches.reshape(B, g, g, f, f, ch).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, c.image_size, c.image_size, ch)

    def _class_ids(self, class_ids, batch: int) -> Tensor:
        ids = torch.as_tensor(class_ids, dtype=torch.long).reshape(-1)
        if ids.numel() == 1 and batch > 1:
            ids = ids.expand(batch)
        if ids.numel() != batch:
            raise ad.ShapeError(f"got {ids.numel()} class ids for a batch of {batch}")
        if int(ids.min()) < 0 or int(ids.max()) > self.config.num_classes:
            raise ValueError(f"class id out of range [0, {self.config.num_classes}]")
        return ids

    def condition(self, class_ids: Tensor) -> Tensor:
        """``(B,) -> (B, N, D)`` rows of the class table."""
        c = self.config
        if not c.semantic:
            class_ids = torch.full_like(class_ids, c.null_class)
        rows = ad.embedding(class_ids, self.class_table)
        return rows.reshape(-1, c.condition_count, c.width)

    # ------------------------------------------------------------------ encoder

    def encode(self, images: Tensor, class_ids) -> Tensor:
        """``(B, H, W, ch) -> (B, K, D)`` latent-query outputs before regularization."""
        c = self.config
        B = images.shape[0]
        ids = self._class_ids(class_ids, B)
        v = self.patch_embed(self.patchify(images)) + self.patch_pos
        cond = self.condition(ids)
        queries = self.latent_queries.expand(B, -1, -1)
        x = ad.concat([v, cond, queries], axis=1)
        for blk in self.encoder:
            x = blk(x)
        x = self.enc_norm(x)
        return ad.slice_seq(x, x.shape[1] - c.latent_count, x.shape[1], axis=1)

    def regularize(self, z: Tensor, noise: Tensor | None = None) -> ReguOutput:
        """Project ``(B, K, D)`` to the latent space and apply the configured regularizer.

        In KL mode ``noise=None`` returns the posterior mean.
        """
        c = self.config
        return regu(
            c.regu,
            self.to_latent(z),
            codebook=self.codebook,
            beta=c.beta,
            tau=c.tau,
            noise=noise,
            entropy_weight=c.softvq_entropy,
        )

    # ------------------------------------------------------------------ decoder

    def decode(self, latents: Tensor, class_ids, k=None) -> Tensor:
        """Reconstruct images from a regularized latent prefix.

        ``latents`` is ``(B, j, d)`` with ``j <= K``. If ``k`` (int or ``(B,)``
        tensor) is given, latent rows at positions ``>= k`` stay in the sequence
        but are masked out of attention; otherwise all ``j`` rows are used.
        """
        c = self.config
        B, j = latents.shape[0], latents.shape[1]
        if j > c.latent_count:
            raise ValueError(f"prefix length {j} exceeds latent_count {c.latent_count}")
        ids = self._class_ids(class_ids, B)
        m = self.mask_tokens.expand(B, -1, -1)
        cond = self.condition(ids)
        lat = self.from_latent(latents) + self.dec_latent_pos[:j]
        x = ad.concat([m, cond, lat], axis=1)
        mask = None
        if k is not None:
            ks = torch.as_tensor(k, dtype=torch.long).reshape(-1).expand(B)
            if int(ks.min()) < 0 or int(ks.max()) > j:
                raise ValueError(f"prefix length outside [0, {j}]")
            mask = prefix_key_mask(c.num_patches + c.condition_count, j, ks)
        for blk in self.decoder:
            x = blk(x, mask)
        x = self.dec_norm(ad.slice_seq(x, 0, c.num_patches, axis=1))
        return self.unpatchify(self.to_pixels(x))

    # ------------------------------------------------------------------ training / inference

    def forward_train(self, images: Tensor, class_ids, rng: torch.Generator, k=None) -> dict:
        """One stochastic training pass.

        Samples a prefix length per image (unless ``k`` is given or tail
        dropping is disabled), draws KL noise from ``rng``, and returns the
        reconstruction, the loss terms and the prefix lengths used.
        """
        c = self.config
        B = images.shape[0]
        if k is not None:
            ks = torch.as_tensor(k, dtype=torch.long).reshape(-1).expand(B).clone()
        elif c.tail_drop:
            ks = sample_prefix_length(rng, c.latent_count, B)
        else:
            ks = torch.full((B,), c.latent_count, dtype=torch.long)
        z = self.encode(images, class_ids)
        noise = None
        if c.regu == "kl":
            noise = torch.randn(B, c.latent_count, c.latent_dim, generator=rng).to(z.dtype)
        out = self.regularize(z, noise)
        recon = self.decode(out.latents, class_ids, ks)
        recon_mse = ad.mse(recon, images)
        keep = (torch.arange(c.latent_count)[None, :] < ks[:, None]).to(z.dtype)
        per_sample = (out.token_aux * keep).sum(1) / ks.clamp_min(1).to(z.dtype)
        regu_aux = per_sample.mean()
        if c.regu == "softvq" and c.softvq_entropy:
            regu_aux = regu_aux + out.aux_loss
        weight = c.kl_weight if c.regu == "kl" else c.aux_weight
        return {
            "recon": recon,
            "loss": recon_mse + weight * regu_aux,
            "recon_mse": recon_mse,
            "regu_aux": regu_aux,
            "k": ks,
        }

    @torch.no_grad()
    def latents(self, images: Tensor, class_ids) -> Tensor:
        """Deterministic regularized latents ``(B, K, d)`` (posterior mean in KL mode)."""
        return self.regularize(self.encode(images, class_ids)).latents

    @torch.no_grad()
    def reconstruct(self, images: Tensor, class_ids, k: int) -> Tensor:
        c = self.config
        if not 0 <= k <= c.latent_count:
            raise ValueError(f"k={k} outside [0, {c.latent_count}]")
        lat = self.latents(images, class_ids)
        return self.decode(lat[:, :k], class_ids)
