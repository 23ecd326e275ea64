"""Reverse-task convergence run (desk profile, no mixing)."""

import argparse
import json
import sys

from mistnar.experiments import convergence
from mistnar.training import MetricsWriter


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--target", type=float, default=0.95)
    ap.add_argument("--out", default="convergence.json")
    args = ap.parse_args()
    res = convergence(seed=args.seed, target=args.target, metrics=MetricsWriter(sys.stdout))
    with open(args.out, "w") as f:
        json.dump(res, f, indent=2)
    print(json.dumps(res))


if __name__ == "__main__":
    main()
