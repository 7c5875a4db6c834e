"""Desk-scale training: PURe20 for 10 epochs on 2,000 stratified images, 500 held out."""

import argparse

from punet.experiments import desk_smoke


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--arch", default="pure20")
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--heldout", type=int, default=500)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    def log(r):
        print(f"epoch {r.epoch:>2}  train loss {r.train_loss:.4f}  held-out loss {r.val_loss:.4f}  held-out acc {r.val_acc:6.2f}%  {r.seconds:6.1f}s")

    res = desk_smoke(args.arch, args.n, args.heldout, args.epochs, args.seed, args.batch_size, log=log)
    print(f"source={res.source} train={res.n_train} heldout={res.n_heldout} top1={res.heldout_top1:.2f} top5={res.heldout_top5:.2f} seconds={res.seconds:.0f}")


if __name__ == "__main__":
    main()
