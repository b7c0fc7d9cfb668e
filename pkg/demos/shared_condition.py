"""Train CARD twice on one frozen tokenizer: shared class table vs a fresh one.

Prints class match and pixel-Frechet for both, and saves a grid of samples
(one row per class) from the shared model.

    python3 demos/shared_condition.py --tok-steps 600 --gen-steps 600
"""

import argparse
import logging
from pathlib import Path

import numpy as np
import torch

from smap import evaluation as ev
from smap.data import make_shapes_dataset
from smap.io import write_image
from smap.tokenizer import TokenizerConfig
from smap.training import TrainConfig, card_config_for, train_generator, train_tokenizer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tok-steps", type=int, default=600)
    ap.add_argument("--gen-steps", type=int, default=600)
    ap.add_argument("--cfg-scale", type=float, default=2.7)
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ds = make_shapes_dataset(seed=0, n_per_class=300)
    tok_cfg = TokenizerConfig(width=64, enc_depth=2, dec_depth=2)
    tokenizer, _ = train_tokenizer(tok_cfg, ds, TrainConfig(steps=args.tok_steps))
    train, train_labels = ds.split("train")
    test, _ = ds.split("test")
    clf = ev.NearestClassMean.fit(train, train_labels)

    ids = torch.arange(tok_cfg.num_classes).repeat_interleave(25)
    for mode in ("shared", "independent"):
        cfg = card_config_for(tok_cfg, condition_mode=mode, width=64, head_width=128, time_dim=64)
        gen, _ = train_generator(cfg, tokenizer, ds, TrainConfig(steps=args.gen_steps, batch_size=64,
                                                                 weight_decay=1e-5))
        with torch.no_grad():
            z = gen.generate(ids, torch.Generator().manual_seed(0), cfg_scale=args.cfg_scale)
            samples = np.clip(tokenizer.decode(z, ids).double().numpy(), 0, 1)
        acc = (clf.predict(samples) == ids.numpy()).mean()
        print(f"{mode:12s} class match {acc:.0%}  pixel-Frechet {ev.pixel_frechet(samples, test):.3f}")
        if mode == "shared":
            per_class = samples.reshape(tok_cfg.num_classes, 25, *samples.shape[1:])[:, :8]
            write_image(ev.image_grid(list(per_class.transpose(1, 0, 2, 3, 4))), out / "samples.pgm")


if __name__ == "__main__":
    main()
