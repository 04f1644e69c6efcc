"""Best-so-far score of surrogate-guided search against uniform random
sampling on a synthetic objective over the architecture encoding."""

import argparse

import numpy as np

from qanas import experiments as E


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--space", default="table1")
    ap.add_argument("--trials", type=int, default=50)
    ap.add_argument("--seeds", type=int, default=20)
    args = ap.parse_args()
    res = E.bo_vs_random(args.space, args.trials, range(args.seeds))
    for s, (a, b) in enumerate(zip(res.a, res.b)):
        print(f"seed {s:2d}: bo {a:8.4f}  random {b:8.4f}")
    print(f"median bo {np.median(res.a):.4f}, random {np.median(res.b):.4f}")
    print(f"bo ahead in {res.wins}/{len(res.a)} seeds, sign test p = {res.sign_test_p():.2e}")


if __name__ == "__main__":
    main()
