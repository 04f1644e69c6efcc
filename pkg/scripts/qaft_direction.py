"""Train the toy seed network, quantize to 4 bits, and compare PTQ accuracy
with accuracy after one QAFT epoch, for several seeds."""

import argparse
import json

from qanas import experiments as E


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--bits", type=int, default=4)
    ap.add_argument("--float-epochs", type=int, default=15)
    args = ap.parse_args()
    rows = E.qaft_direction(range(args.seeds), args.bits, args.float_epochs)
    for r in rows:
        print(json.dumps(r.__dict__))
    wins = sum(r.qaft_accuracy > r.ptq_accuracy for r in rows)
    print(f"QAFT better in {wins}/{len(rows)} seeds")


if __name__ == "__main__":
    main()
