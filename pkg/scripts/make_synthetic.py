"""Write the synthetic grating dataset to disk (image directory or packed file)."""

import argparse
from pathlib import Path

from torsd.data import make_synthetic_dataset, save_image_dir, save_packed


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", type=Path, help="directory (image format) or file (packed format)")
    parser.add_argument("--classes", type=int, default=4)
    parser.add_argument("--per-class", type=int, default=100)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--noise", type=float, default=0.35)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--packed", action="store_true", help="write the packed binary format")
    args = parser.parse_args()

    data = make_synthetic_dataset(args.classes, args.per_class, size=args.size, noise=args.noise, seed=args.seed)
    (save_packed if args.packed else save_image_dir)(args.out, data)
    print(f"wrote {len(data)} images to {args.out}")


if __name__ == "__main__":
    main()
