"""Single-batch overfit: PURe20 on 32 fixed images for 200 epochs.

Uses CIFAR-10 when PUNET_CIFAR_DIR is set, otherwise the synthetic set.
"""

import argparse

from punet.experiments import overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--arch", default="pure20")
    ap.add_argument("--n", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    def log(r):
        if r.epoch <= 5 or r.epoch % 10 == 0:
            print(f"epoch {r.epoch:>3}  loss {r.train_loss:.5f}  train acc {r.train_acc:6.2f}%  eval-mode acc {r.val_acc:6.2f}%  {r.seconds:6.1f}s")

    res = overfit(args.arch, args.n, args.epochs, args.seed, log=log)
    print(res)


if __name__ == "__main__":
    main()
