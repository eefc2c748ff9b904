"""Train a small score network on random-ellipse phantoms.

    python3 scripts/train_prior.py --out prior_ckpt --n 300 --size 32 --epochs 10
"""

import argparse
import logging

import numpy as np

from mrprior.acquisition import phantom
from mrprior.priors import schedule
from mrprior.scorenet import TrainConfig, save_checkpoint, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--n", type=int, default=300)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--levels", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    data = np.stack([phantom(args.size, args.size, "random-ellipses", "smooth-random", seed=args.seed + i)
                     for i in range(args.n)])
    data /= np.abs(data).reshape(len(data), -1).max(axis=1)[:, None, None]
    cfg = TrainConfig(epochs=args.epochs, learn_rate=args.lr, seed=args.seed, schedule=schedule(args.levels))
    net, hist = train(data, cfg)
    save_checkpoint(net, args.out)
    print(f"final loss {hist[-20:].mean():.4g}; checkpoint in {args.out}")


if __name__ == "__main__":
    main()
