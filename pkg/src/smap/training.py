"""AdamW, warmup + cosine schedule, and the two training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import autodiff as ad
from .card import CARD, CardConfig, ConditionMode
from .data import ShapesDataset
from .tokenizer import SMAPTokenizer, TokenizerConfig

log = logging.getLogger(__name__)

Tensor = torch.Tensor
DTYPES = {"float32": torch.float32, "float64": torch.float64}


# --------------------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    exp_avg: list[Tensor] = field(default_factory=list)
    exp_avg_sq: list[Tensor] = field(default_factory=list)


@torch.no_grad()
def adamw_step(params: list[Tensor], grads: list[Tensor | None], state: OptimizerState) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if state.weight_decay:
            p.mul_(1.0 - state.lr * state.weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / c1)


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    min_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})"
            )


def lr_at(step: int, sched: Schedule) -> float:
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------- training loops


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_steps: int = 100
    weight_decay: float = 1e-4
    seed: int = 0
    dtype: str = "float32"

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    null_count: int = 0
    samples_seen: int = 0

    def smoothed(self, window: int = 50) -> np.ndarray:
        x = np.asarray(self.losses)
        if len(x) < window:
            return x
        return np.convolve(x, np.ones(window) / window, mode="valid")


def _seeded(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def build_tokenizer(config: TokenizerConfig, seed: int, dtype=torch.float32) -> SMAPTokenizer:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = SMAPTokenizer(config)
    return model.to(dtype)


def _run(model, params, loss_fn, train: TrainConfig, sample_fn, rng: torch.Generator) -> TrainLog:
    history = TrainLog()
    if train.steps == 0:
        return history
    sched = Schedule(train.lr, train.min_lr, min(train.warmup_steps, train.steps - 1), train.steps)
    state = OptimizerState(lr=train.lr, weight_decay=train.weight_decay)
    model.train()
    for step in range(1, train.steps + 1):
        state.lr = lr_at(step, sched)
        batch = sample_fn(rng)
        for p in params:
            p.grad = None
        loss = loss_fn(batch, rng, history)
        ad.backward(loss)
        adamw_step(params, [p.grad for p in params], state)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} at step {step}")
        history.losses.append(value)
        history.lrs.append(state.lr)
        if step % 250 == 0:
            log.info("step %d loss %.5f lr %.2e", step, value, state.lr)
    model.eval()
    return history


def train_tokenizer(config: TokenizerConfig, dataset: ShapesDataset, train: TrainConfig,
                    model: SMAPTokenizer | None = None) -> tuple[SMAPTokenizer, TrainLog]:
    """Train on the dataset's train split; bitwise reproducible given ``train.seed``."""
    dtype = train.torch_dtype
    if model is None:
        model = build_tokenizer(config, train.seed, dtype)
    images, labels = dataset.split("train")
    images = torch.as_tensor(images, dtype=dtype)
    labels = torch.as_tensor(labels)
    rng = _seeded(train.seed + 1)
    params = [p for p in model.parameters() if p.requires_grad]

    def sample(g):
        idx = torch.randint(0, len(labels), (train.batch_size,), generator=g)
        return images[idx], labels[idx]

    def loss_fn(batch, g, history):
        history.samples_seen += batch[0].shape[0]
        return model.forward_train(batch[0], batch[1], g)["loss"]

    return model, _run(model, params, loss_fn, train, sample, rng)


def encode_dataset(tokenizer: SMAPTokenizer, images: np.ndarray, labels: np.ndarray,
                   batch: int = 256) -> Tensor:
    """Deterministic tokenizer latents for a whole array of images."""
    dtype = next(tokenizer.parameters()).dtype
    out = []
    for i in range(0, len(labels), batch):
        x = torch.as_tensor(images[i : i + batch], dtype=dtype)
        out.append(tokenizer.latents(x, torch.as_tensor(labels[i : i + batch])))
    return torch.cat(out)


def card_config_for(tokenizer: TokenizerConfig, **overrides) -> CardConfig:
    """A generator config whose token count, latent and condition sizes match ``tokenizer``."""
    base = dict(
        token_count=tokenizer.latent_count,
        latent_dim=tokenizer.latent_dim,
        cond_dim=tokenizer.condition_count * tokenizer.width,
        num_classes=tokenizer.num_classes,
    )
    base.update(overrides)
    return CardConfig(**base)


def build_generator(config: CardConfig, tokenizer: SMAPTokenizer | None, seed: int,
                    dtype=torch.float32) -> CARD:
    table = None
    if config.mode is ConditionMode.SHARED:
        if tokenizer is None:
            raise ValueError("shared condition mode needs a tokenizer")
        table = tokenizer.class_table
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = CARD(config, table)
    return model.to(dtype)


def train_generator(config: CardConfig, tokenizer: SMAPTokenizer, dataset: ShapesDataset,
                    train: TrainConfig) -> tuple[CARD, TrainLog]:
    """Fit the generator on frozen-tokenizer latents of the train split.

    Each sample's class is swapped for the null class with probability
    ``config.class_dropout``; ``TrainLog.null_count`` counts the swaps.
    """
    dtype = train.torch_dtype
    tokenizer = tokenizer.to(dtype).eval()
    for p in tokenizer.parameters():
        p.requires_grad_(False)
    images, labels = dataset.split("train")
    latents = encode_dataset(tokenizer, images, labels)
    labels = torch.as_tensor(labels)
    model = build_generator(config, tokenizer, train.seed, dtype)
    model.set_normalization(latents)
    rng = _seeded(train.seed + 1)
    params = [p for p in model.parameters() if p.requires_grad]

    def sample(g):
        idx = torch.randint(0, len(labels), (train.batch_size,), generator=g)
        ids = labels[idx].clone()
        drop = torch.rand(train.batch_size, generator=g) < config.class_dropout
        ids[drop] = config.null_class
        return latents[idx], ids, int(drop.sum())

    def loss_fn(batch, g, history):
        z, ids, dropped = batch
        history.null_count += dropped
        history.samples_seen += z.shape[0]
        return model.training_loss(z, ids, g)

    return model, _run(model, params, loss_fn, train, sample, rng)


def parameter_checksum(model: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()
