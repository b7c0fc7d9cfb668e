"""Command-line entry point: ``smap --config run.json [--mode M] [--out DIR] [--seed N]``.

Exit status is 0 on success, 2 for configuration problems (bad flags,
unreadable or invalid config, missing checkpoints) and 1 for anything that
goes wrong while running.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from . import gradcheck
from .card import CARD
from .config import MODES, U64_MAX, ConfigError, RunConfig, from_flat, parse_config, to_flat
from .data import CLASSES, make_shapes_dataset
from .io import ModelBundle, load_checkpoint, save_checkpoint, write_image
from .tokenizer import SMAPTokenizer
from .training import DTYPES, TrainLog, train_generator, train_tokenizer

log = logging.getLogger("smap")

TOKENIZER_CKPT = "tokenizer.ckpt"
GENERATOR_CKPT = "generator.ckpt"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="smap",
        description="Train and probe a semantic prefix tokenizer and its autoregressive flow generator "
        "on a synthetic shapes dataset.",
        epilog="Environment: SMAP_THREADS caps intra-op threads (0 = library default).",
    )
    p.add_argument("--config", required=True, help="flat JSON run configuration")
    p.add_argument("--mode", choices=MODES, help="overrides the config's mode")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int, help="training/sampling seed, unsigned 64-bit (overrides seed)")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    return p


def load_run_config(args: argparse.Namespace) -> RunConfig:
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    cfg = parse_config(text)
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        if not 0 <= args.seed <= U64_MAX:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        overrides["seed"] = args.seed
    cfg = replace(cfg, **overrides)
    tok = cfg.tokenizer
    if tok.channels != 1 or tok.num_classes != len(CLASSES):
        raise ConfigError(f"the shapes dataset is grayscale with {len(CLASSES)} classes; "
                          f"got channels={tok.channels}, num_classes={tok.num_classes}")
    return cfg


def _checkpoint_path(cfg: RunConfig, explicit: str, default: str) -> Path:
    return Path(explicit) if explicit else Path(cfg.out_dir) / default


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} checkpoint not found: {path}")
    return path


def _set_threads(cfg: RunConfig) -> None:
    raw = os.environ.get("SMAP_THREADS", "")
    try:
        threads = int(raw) if raw else cfg.threads
    except ValueError:
        raise ConfigError(f"SMAP_THREADS must be an integer, got {raw!r}") from None
    if threads < 0:
        raise ConfigError("SMAP_THREADS must be >= 0")
    if threads:
        torch.set_num_threads(threads)


def _write_loss_csv(history: TrainLog, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(history.losses, history.lrs), start=1):
            w.writerow([i, f"{loss:.9g}", f"{lr:.9g}"])


def _dataset(cfg: RunConfig):
    return make_shapes_dataset(cfg.dataset_seed, cfg.n_per_class, cfg.tokenizer.image_size)


def _load_tokenizer(path: Path, dtype: torch.dtype) -> SMAPTokenizer:
    bundle = load_checkpoint(path)
    if bundle.kind != "tokenizer":
        raise ConfigError(f"{path} holds a {bundle.kind!r} checkpoint, expected a tokenizer")
    model = SMAPTokenizer(from_flat(bundle.config).tokenizer)
    bundle.load_into(model)
    return model.to(dtype).eval()


def _load_generator(path: Path, tokenizer: SMAPTokenizer, dtype: torch.dtype) -> CARD:
    bundle = load_checkpoint(path)
    if bundle.kind != "generator":
        raise ConfigError(f"{path} holds a {bundle.kind!r} checkpoint, expected a generator")
    gen_cfg = from_flat(bundle.config)
    if gen_cfg.tokenizer != tokenizer.config:
        raise ConfigError("generator checkpoint was trained against a different tokenizer config")
    model = CARD(gen_cfg.card, tokenizer.class_table if gen_cfg.card.mode.value == "shared" else None)
    bundle.load_into(model)
    return model.to(dtype).eval()


def _test_subset(cfg: RunConfig, ds, per_class: int):
    """First ``per_class`` test images of every class, grouped by class."""
    images, labels = ds.split("test")
    idx = np.concatenate([np.flatnonzero(labels == c)[:per_class] for c in range(len(CLASSES))])
    return images[idx], labels[idx]


# --------------------------------------------------------------------------- modes


def run_train_tokenizer(cfg: RunConfig, out: Path) -> None:
    model, history = train_tokenizer(cfg.tokenizer, _dataset(cfg), cfg.tokenizer_train())
    ckpt = _checkpoint_path(cfg, cfg.tokenizer_checkpoint, TOKENIZER_CKPT)
    save_checkpoint(ModelBundle.from_module("tokenizer", model, to_flat(cfg)), ckpt)
    _write_loss_csv(history, out / "tokenizer_loss.csv")
    print(f"tokenizer: {len(history.losses)} steps, final loss "
          f"{history.losses[-1] if history.losses else float('nan'):.6g}, saved {ckpt}")


def run_train_generator(cfg: RunConfig, out: Path, dtype) -> None:
    tok_path = _require(_checkpoint_path(cfg, cfg.tokenizer_checkpoint, TOKENIZER_CKPT), "tokenizer")
    tokenizer = _load_tokenizer(tok_path, dtype)
    tc = tokenizer.config
    card = replace(cfg.card, token_count=tc.latent_count, latent_dim=tc.latent_dim,
                   cond_dim=tc.condition_count * tc.width, num_classes=tc.num_classes)
    cfg = replace(cfg, tokenizer=tc, card=card)
    model, history = train_generator(cfg.card, tokenizer, _dataset(cfg), cfg.generator_train())
    ckpt = _checkpoint_path(cfg, cfg.generator_checkpoint, GENERATOR_CKPT)
    save_checkpoint(ModelBundle.from_module("generator", model, to_flat(cfg)), ckpt)
    _write_loss_csv(history, out / "generator_loss.csv")
    print(f"generator: {len(history.losses)} steps, {history.null_count} null-class swaps, saved {ckpt}")


def run_reconstruct(cfg: RunConfig, out: Path, tokenizer: SMAPTokenizer) -> None:
    images, labels = _test_subset(cfg, _dataset(cfg), cfg.samples_per_class)
    rec = ev.reconstruct_all(tokenizer, images, labels, tokenizer.config.latent_count)
    write_image(ev.image_grid([images, np.clip(rec, 0, 1)]), out / "reconstruct.pgm")
    mse = float(((rec - images) ** 2).mean())
    (out / "reconstruct.csv").write_text(f"images,mse,psnr\n{len(labels)},{mse:.9g},{ev.psnr(mse):.9g}\n")
    print(f"reconstruct: {len(labels)} test images, mse {mse:.6g}")


def run_sweep_prefix(cfg: RunConfig, out: Path, tokenizer: SMAPTokenizer) -> None:
    ds = _dataset(cfg)
    images, labels = ds.split("test")
    report, recons = ev.eval_prefix_sweep(tokenizer, images, labels)
    (out / "sweep_prefix.csv").write_text(report.to_csv())
    pick = np.concatenate([np.flatnonzero(labels == c)[: cfg.samples_per_class] for c in range(len(CLASSES))])
    for k, rec in recons.items():
        write_image(ev.image_grid([images[pick], np.clip(rec[pick], 0, 1)]), out / f"sweep_k{k}.pgm")
    print(report.to_csv(), end="")


def run_cross_swap(cfg: RunConfig, out: Path, tokenizer: SMAPTokenizer) -> None:
    ds = _dataset(cfg)
    train_x, train_y = ds.split("train")
    images, labels = ds.split("test")
    clf = ev.NearestClassMean.fit(train_x, train_y)
    pairs = ev.cross_pairs(labels, cfg.cross_pairs, cfg.seed)
    acc, _, grid = ev.eval_cross_swap(tokenizer, images, labels, pairs, clf)
    write_image(grid, out / "cross_swap.pgm")
    (out / "cross_swap.csv").write_text(f"pairs,accuracy\n{len(pairs)},{acc:.9g}\n")
    print(f"cross-swap: {len(pairs)} pairs, decoded as the condition's class {acc:.1%}")


def run_generate(cfg: RunConfig, out: Path, tokenizer: SMAPTokenizer, generator: CARD) -> None:
    n = cfg.samples_per_class
    ids = torch.arange(len(CLASSES)).repeat_interleave(n)
    rng = torch.Generator().manual_seed(cfg.seed)
    with torch.no_grad():
        latents = generator.generate(ids, rng)
        images = tokenizer.decode(latents, ids).double().numpy()
    images = np.clip(images, 0.0, 1.0)
    sample_dir = out / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)
    for j, (img, c) in enumerate(zip(images, ids.tolist())):
        write_image(img, sample_dir / f"{CLASSES[c]}_{j % n:03d}.pgm")
    rows = [images[ids.numpy() == c] for c in range(len(CLASSES))]
    write_image(ev.image_grid([np.stack([r[i] for r in rows]) for i in range(n)]), out / "generate.pgm")
    print(f"generate: {len(images)} samples ({n} per class) in {sample_dir}")


def run_gradcheck(cfg: RunConfig, out: Path) -> bool:
    results = gradcheck.run_suite(seeds=100)
    with (out / "gradcheck.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "seeds", "max_rel_error", "passed"])
        for r in results:
            w.writerow([r.name, r.seeds, f"{r.max_rel_error:.3e}", int(r.passed)])
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name:24s} max rel err {r.max_rel_error:.2e}")
    return all(r.passed for r in results)


def dispatch(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = DTYPES[cfg.dtype]
    mode = cfg.mode
    if mode == "gradcheck":
        return 0 if run_gradcheck(cfg, out) else 1
    if mode == "train-tokenizer":
        run_train_tokenizer(cfg, out)
        return 0
    if mode == "train-generator":
        run_train_generator(cfg, out, dtype)
        return 0
    tok_path = _require(_checkpoint_path(cfg, cfg.tokenizer_checkpoint, TOKENIZER_CKPT), "tokenizer")
    if mode == "generate":
        gen_path = _require(_checkpoint_path(cfg, cfg.generator_checkpoint, GENERATOR_CKPT), "generator")
        tokenizer = _load_tokenizer(tok_path, dtype)
        run_generate(cfg, out, tokenizer, _load_generator(gen_path, tokenizer, dtype))
        return 0
    tokenizer = _load_tokenizer(tok_path, dtype)
    {"reconstruct": run_reconstruct, "sweep-prefix": run_sweep_prefix, "cross-swap": run_cross_swap}[mode](
        cfg, out, tokenizer
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help exits 0, usage errors exit 2
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args)
        _set_threads(cfg)
        return dispatch(cfg)
    except ConfigError as e:
        print(f"smap: config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit 1
        print(f"smap: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
