"""Batch-1 latency of every decoding strategy at a forced output length."""

import argparse
import json

from mistnar.experiments import LatencyConfig, latency


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--length", type=int, default=32)
    ap.add_argument("--n-examples", type=int, default=60)
    ap.add_argument("--iterations", type=int, default=3)
    ap.add_argument("--out", default="latency.json")
    args = ap.parse_args()
    rep = latency(LatencyConfig(length=args.length, n_examples=args.n_examples,
                                mist_iterations=args.iterations))
    with open(args.out, "w") as f:
        json.dump(rep, f, indent=2)
    for name, s in rep["strategies"].items():
        print(f"{name:13s} median {s['median_ns'] / 1e6:7.2f} ms  p90 {s['p90_ns'] / 1e6:7.2f} ms"
              f"  speedup {s['speedup']:5.2f}x")


if __name__ == "__main__":
    main()
