"""Finite-difference checks for every differentiable primitive and composite.

Each check is a builder ``seed -> (f, x)`` producing a scalar function of a
small float64 tensor; ``run_suite`` feeds each builder a range of seeds
through :func:`autodiff.finite_diff_check` with the fourth-order stencil.
Whole-model builders return ``(f, x, n)`` and get ``n`` random coordinates
probed per seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch.nn.utils.stateless import _reparametrize_module

from . import autodiff as ad
from .card import CARD, CardConfig
from .regularizers import GaussianPosterior, kl_reparameterize, softvq_quantize
from .tokenizer import SMAPTokenizer, TokenizerConfig
from .transformer import AdaLNBlock, Attention, Block, causal_mask, multi_head_attention

Tensor = torch.Tensor
F64 = torch.float64
# whole-model checks probe this many random coordinates per seed
SAMPLED_COORDS = 32


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _randn(g, *shape):
    return torch.randn(*shape, generator=g, dtype=F64)


def _weighted(out: Tensor, w: Tensor) -> Tensor:
    # random linear functional of the output, so every output coordinate matters
    return (out * w).sum()


def _module(factory, seed: int, scale: float = 0.3):
    """Build a float64 module with all parameters redrawn at ``scale`` (no zero-init)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        m = factory().to(F64)
        with torch.no_grad():
            for p in m.parameters():
                p.copy_(torch.randn_like(p) * scale)
    return m


def check_matmul(seed):
    g = _gen(seed)
    b, w = _randn(g, 3, 2), _randn(g, 2, 2)
    return lambda a: _weighted(ad.matmul(a, b), w), _randn(g, 2, 3)


def check_add(seed):
    g = _gen(seed)
    b, w = _randn(g, 2, 3), _randn(g, 2, 3)
    return lambda a: _weighted(ad.add(a, b), w), _randn(g, 2, 3)


def check_mul(seed):
    g = _gen(seed)
    b, w = _randn(g, 2, 3), _randn(g, 2, 3)
    return lambda a: _weighted(ad.mul(a, b), w), _randn(g, 2, 3)


def check_softmax(seed):
    g = _gen(seed)
    w = _randn(g, 2, 4)
    return lambda x: _weighted(ad.softmax(x, -1), w), _randn(g, 2, 4)


def check_softmax_xent(seed):
    g = _gen(seed)
    target = torch.randint(0, 5, (3,), generator=g)

    def f(x):
        p = ad.softmax(x, -1)
        return -p[torch.arange(3), target].log().mean()

    return f, _randn(g, 3, 5)


def check_layer_norm(seed):
    g = _gen(seed)
    gain, bias, w = _randn(g, 4), _randn(g, 4), _randn(g, 3, 4)
    return lambda x: _weighted(ad.layer_norm(x, gain, bias, 1e-6), w), _randn(g, 3, 4)


def check_layer_norm_gain(seed):
    g = _gen(seed)
    x, bias, w = _randn(g, 3, 4), _randn(g, 4), _randn(g, 3, 4)
    return lambda gain: _weighted(ad.layer_norm(x, gain, bias, 1e-6), w), _randn(g, 4)


def check_gelu(seed):
    g = _gen(seed)
    w = _randn(g, 6)
    return lambda x: _weighted(ad.gelu(x), w), 2.0 * _randn(g, 6)


def check_embedding(seed):
    g = _gen(seed)
    ids = torch.tensor([0, 2, 2, 1])
    w = _randn(g, 4, 3)
    return lambda table: _weighted(ad.embedding(ids, table), w), _randn(g, 3, 3)


def check_concat_slice(seed):
    g = _gen(seed)
    other, w = _randn(g, 2, 3), _randn(g, 3, 3)

    def f(x):
        joined = ad.concat([x, other], axis=0)
        return _weighted(ad.slice_seq(joined, 1, 4, axis=0), w)

    return f, _randn(g, 2, 3)


def check_mse(seed):
    g = _gen(seed)
    target = _randn(g, 2, 3)
    return lambda x: ad.mse(x, target), _randn(g, 2, 3)


def check_softvq(seed):
    g = _gen(seed)
    entries, w = _randn(g, 5, 2), _randn(g, 3, 2)
    return lambda z: _weighted(softvq_quantize(z, entries, tau=0.7).latents, w), _randn(g, 3, 2)


def check_kl(seed):
    g = _gen(seed)
    noise, w = _randn(g, 3, 2), _randn(g, 3, 2)

    def f(moments):
        out = kl_reparameterize(GaussianPosterior.from_moments(moments), noise)
        return _weighted(out.latents, w) + out.aux_loss

    return f, _randn(g, 3, 4)


def check_attention(seed):
    g = _gen(seed)
    attn = _module(lambda: Attention(4, 2), seed)
    w = _randn(g, 3, 4)
    mask = causal_mask(3)
    return lambda x: _weighted(multi_head_attention(x, mask, attn), w), _randn(g, 3, 4)


def check_block(seed):
    g = _gen(seed)
    blk = _module(lambda: Block(4, 2, 2.0), seed)
    w = _randn(g, 3, 4)
    return lambda x: _weighted(blk(x), w), _randn(g, 3, 4)


def check_adaln_block(seed):
    g = _gen(seed)
    blk = _module(lambda: AdaLNBlock(4, 2, 2.0), seed)
    x, w = _randn(g, 3, 4), _randn(g, 3, 4)
    return lambda cond: _weighted(blk(x, cond, causal_mask(3)), w), _randn(g, 4)


def _tiny_card(seed):
    cfg = CardConfig(depth=1, width=4, heads=2, head_blocks=1, head_width=6, token_count=2,
                     latent_dim=2, cond_dim=4, num_classes=2, time_dim=4,
                     condition_mode="independent")
    return _module(lambda: CARD(cfg), seed)


def check_velocity(seed):
    g = _gen(seed)
    model = _tiny_card(seed)
    t = torch.rand(3, generator=g, dtype=F64)
    h, cond, w = _randn(g, 3, 4), _randn(g, 3, 4), _randn(g, 3, 2)
    return lambda x: _weighted(model.velocity(x, t, h, cond), w), _randn(g, 3, 2)


def _as_function_of_params(model, prefix: str, loss):
    """Turn ``loss()`` into a function of one flat vector holding the parameters under ``prefix``."""
    named = {k: v for k, v in model.named_parameters() if k.startswith(prefix)}
    flat = torch.cat([v.detach().reshape(-1) for v in named.values()])

    def f(vec):
        parts, i = {}, 0
        for k, v in named.items():
            parts[k] = vec[i : i + v.numel()].reshape(v.shape)
            i += v.numel()
        with _reparametrize_module(model, parts):
            return loss()

    return f, flat


def check_flow_loss_params(seed):
    """Flow-matching loss as a function of every velocity-head parameter."""
    g = _gen(seed)
    model = _tiny_card(seed)
    x0, h, cond = _randn(g, 3, 2), _randn(g, 3, 4), _randn(g, 3, 4)
    t, noise = torch.rand(3, generator=g, dtype=F64), _randn(g, 3, 2)
    f, flat = _as_function_of_params(model, "head.", lambda: model.flow_matching_loss(x0, h, cond, t=t, noise=noise))
    return f, flat, SAMPLED_COORDS


MICRO_TOKENIZER = TokenizerConfig(
    image_size=8, patch_size=4, channels=1, width=4, latent_count=2, condition_count=1,
    num_classes=2, regu="kl", latent_dim=2, enc_depth=1, dec_depth=1, heads=2, mlp_ratio=2.0,
    kl_weight=0.1,
)


def check_tokenizer_loss(seed):
    g = _gen(seed)
    model = _module(lambda: SMAPTokenizer(MICRO_TOKENIZER), seed)
    images = torch.rand(2, 8, 8, 1, generator=g, dtype=F64)
    labels = torch.randint(0, 2, (2,), generator=g)
    ks = torch.randint(0, 3, (2,), generator=g)
    # same generator seed every call, so the posterior noise is fixed
    f, flat = _as_function_of_params(
        model, "", lambda: model.forward_train(images, labels, _gen(seed + 7), k=ks)["loss"]
    )
    return f, flat, SAMPLED_COORDS


CHECKS: dict[str, Callable] = {
    "matmul": check_matmul,
    "add": check_add,
    "mul": check_mul,
    "softmax": check_softmax,
    "softmax_xent": check_softmax_xent,
    "layer_norm": check_layer_norm,
    "layer_norm_gain": check_layer_norm_gain,
    "gelu": check_gelu,
    "embedding": check_embedding,
    "concat_slice": check_concat_slice,
    "mse": check_mse,
    "softvq": check_softvq,
    "kl_reparameterize": check_kl,
    "attention": check_attention,
    "block": check_block,
    "adaln_block": check_adaln_block,
    "velocity_head": check_velocity,
    "flow_loss_head_params": check_flow_loss_params,
    "tokenizer_loss": check_tokenizer_loss,
}


@dataclass
class SuiteResult:
    name: str
    seeds: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def run_check(name: str, seeds: int = 100, tol: float = 1e-4, h: float = 1e-3) -> SuiteResult:
    worst = 0.0
    for seed in range(seeds):
        f, x, *sample = CHECKS[name](seed)
        coords = None
        if sample and sample[0] < x.numel():
            coords = torch.randperm(x.numel(), generator=_gen(seed))[: sample[0]].tolist()
        rep = ad.finite_diff_check(f, x, h=h, tol=tol, coords=coords, stencil=4)
        worst = max(worst, rep.max_rel_error)
    return SuiteResult(name, seeds, worst, tol)


def run_suite(seeds: int = 100, tol: float = 1e-4, names=None) -> list[SuiteResult]:
    return [run_check(n, seeds, tol) for n in (names or CHECKS)]
