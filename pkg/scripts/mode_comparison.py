"""Paired qaft_mp / ptq_mp searches: small-size attainment and wall time.

Writes one JSON line per seed to stdout, then the medians and time totals.
"""

import argparse
import dataclasses
import json

import numpy as np

from qanas import data as D
from qanas import experiments as E


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=30)
    args = ap.parse_args()
    ds = D.digits(500, 500)
    pairs = []
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        p = E.mode_pair(seed, max_trials=args.trials, dataset=ds)
        pairs.append(p)
        print(json.dumps(dataclasses.asdict(p)), flush=True)
    for mode in ("qaft_mp", "ptq_mp"):
        att = np.median([p.attainment[mode] for p in pairs])
        secs = sum(p.search_seconds[mode] for p in pairs)
        print(f"{mode}: median small-size accuracy {att:.3f}, total search {secs:.0f}s")


if __name__ == "__main__":
    main()
