"""Train the six ablation rows (BL, +RD, +RN, +RN+AC, +LD, full) on the desk task.

For each row prints accuracy and which loss components were nonzero at some
training step.
"""

import argparse
import dataclasses

from torsd.experiments import ABLATIONS, DESK_OPTIM, ablation_rows, desk_data


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=DESK_OPTIM.epochs)
    args = parser.parse_args()

    opt = dataclasses.replace(DESK_OPTIM, epochs=args.epochs)
    rows = ablation_rows(args.seed, opt, desk_data())
    for name in ABLATIONS:
        r = rows[name]
        print(f"{name:7s} acc={r.accuracy:.4f} active={','.join(r.active)}")


if __name__ == "__main__":
    main()
