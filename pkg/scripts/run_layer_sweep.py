#!/usr/bin/env python3
"""Sweep the LSTM stack depth (1..4 layers) and report the final metric.

Usage: python scripts/run_layer_sweep.py [--out runs/sweep] [--seed 0]
"""

import argparse

from dynrank import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    config = harness.sweep_config(out_dir=args.out, seed=args.seed)
    report = harness.run(config, "sweep-layers")
    print("\nfinal metric by stack depth:")
    for layers, name, value in report.tables["sweep"]:
        print(f"  J={layers}  {name:<12} {value:.4f}")


if __name__ == "__main__":
    main()
