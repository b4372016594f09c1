#!/usr/bin/env python3
"""Compare feedback variants (embedding Rocchio, classic Rocchio, naive
expansion, none) on the multi-subtopic synthetic profile.

Usage: python scripts/run_ablation.py [--out runs/ablation] [--seed 0]
"""

import argparse

from dynrank import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    config = harness.trend_config(out_dir=args.out, seed=args.seed)
    report = harness.run(config, "ablate")
    print("\nfinal-iteration means per variant:")
    last = max(it for _, it, *_ in report.tables["ablation"])
    for variant, it, name, mean, std in report.tables["ablation"]:
        if it == last:
            print(f"  {variant:<16} {name:<12} {mean:.4f} +- {std:.4f}")
    if report.notes:
        print("\nnotes:")
        for note in report.notes:
            print(f"  - {note}")


if __name__ == "__main__":
    main()
