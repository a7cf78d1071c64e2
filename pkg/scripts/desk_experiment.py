"""Baseline vs full training on the desk-scale synthetic task.

Prints test accuracy and per-depth SSE/SSB for every seed, then the
directional summary. Usage:

    python scripts/desk_experiment.py --seeds 0 1 2 --out results/desk.csv
"""

import argparse
import csv
import dataclasses
import time
from pathlib import Path

import numpy as np

from torsd.experiments import DESK_OPTIM, baseline_vs_full, desk_data


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--epochs", type=int, default=DESK_OPTIM.epochs)
    parser.add_argument("--noise", type=float, default=None, help="override the pixel noise level")
    parser.add_argument("--out", type=Path, help="optional CSV of per-run results")
    args = parser.parse_args()

    data_kwargs = {} if args.noise is None else {"noise": args.noise}
    data = desk_data(**data_kwargs)
    opt = dataclasses.replace(DESK_OPTIM, epochs=args.epochs)
    start = time.time()
    runs = baseline_vs_full(args.seeds, opt, data)

    rows = []
    for name, outcomes in runs.items():
        for r in outcomes:
            rows.append([name, r.seed, r.accuracy, *r.ratios])
            ratios = " ".join(f"{x:.3f}" for x in r.ratios)
            print(f"{name:5s} seed={r.seed} acc={r.accuracy:.4f} sse/ssb=[{ratios}]")

    bl, full = runs["BL"], runs["full"]
    gains = [f.accuracy - b.accuracy for f, b in zip(full, bl)]
    wins = sum(g >= 0 for g in gains)
    print(f"accuracy: full >= BL on {wins}/{len(gains)} seeds, mean gain {np.mean(gains):+.4f}")
    mean_bl = np.mean([r.ratios for r in bl], axis=0)
    mean_full = np.mean([r.ratios for r in full], axis=0)
    for depth, (b, f) in enumerate(zip(mean_bl, mean_full), 1):
        print(f"depth {depth}: mean SSE/SSB BL {b:.3f} -> full {f:.3f}")
    print(f"elapsed {time.time() - start:.0f}s")

    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["config", "seed", "accuracy"] + [f"ratio_depth{i + 1}" for i in range(len(mean_bl))])
            writer.writerows(rows)


if __name__ == "__main__":
    main()
