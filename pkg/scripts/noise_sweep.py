"""Accuracy drop under Poisson noise for a trained checkpoint over several peaks."""

import argparse

from punet.checkpoint import load_checkpoint
from punet.cli import RunConfig, load_splits
from punet.data import NoiseConfig, Normalizer, noise_degradation, poisson_corrupt
from punet.training import evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint")
    ap.add_argument("--peaks", default="1,3,10,30,100,255")
    ap.add_argument("--split", default="test", choices=["train", "val", "test"])
    args = ap.parse_args()

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build()
    norm = Normalizer.from_dict(ckpt.meta["normalization"])
    cfg = RunConfig(**ckpt.meta["config"])
    ds = dict(zip(("train", "val", "test"), load_splits(cfg)))[args.split]
    clean = evaluate(model, ds, norm).top1
    print(f"clean top-1 {clean:.2f}% on {len(ds)} {args.split} images")
    print("peak,noisy_acc,drop_pct")
    for peak in (float(p) for p in args.peaks.split(",")):
        noisy = evaluate(model, poisson_corrupt(ds, NoiseConfig(peak, cfg.seed or 0)), norm).top1
        print(f"{peak:g},{noisy:.2f},{noise_degradation(clean, noisy):.3f}")


if __name__ == "__main__":
    main()
