"""Mean trial score in the first and second half of a search, over seeds.

Early training defaults to 2 epochs so a 50-trial, 20-seed sweep takes about
ten minutes; pass ``--early-epochs 5`` for the default budget.
"""

import argparse

import numpy as np

from qanas import data as D
from qanas import experiments as E
from qanas import nn
from qanas import search as R


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=50)
    ap.add_argument("--early-epochs", type=int, default=2)
    ap.add_argument("--mode", default="qaft_mp", choices=R.MODES)
    args = ap.parse_args()
    ds = D.digits(500, 500)
    base = R.RunConfig(
        mode=args.mode,
        max_trials=args.trials,
        early=nn.TrainConfig(epochs=args.early_epochs),
    )
    diffs = []
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        first, second = E.score_halves(base.replace(seed=seed), ds)
        diffs.append(second - first)
        print(f"seed {seed:2d}: first half {first:.4f}, second half {second:.4f}", flush=True)
    print(f"median second-minus-first {np.median(diffs):+.4f}; later half higher in "
          f"{sum(d > 0 for d in diffs)}/{len(diffs)} seeds")


if __name__ == "__main__":
    main()
