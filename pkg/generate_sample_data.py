#!/usr/bin/env python3
"""
Write a small synthetic dataset in MNIST's IDX layout for smoke runs.

The files land in data/ under the MNIST file names, so
`pemn train --dataset mnist --data-dir data` works without downloads.
Real MNIST / CIFAR-10 files are read from the same kind of directory.
"""

import argparse
from pathlib import Path
import sys

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np

from src.ingestion import MNIST_FILES, write_idx
from src.protogen import rng_stream

FETCH_HINTS = """\
Real datasets (place the files in --data-dir, .gz accepted for MNIST):
  MNIST     train-images-idx3-ubyte, train-labels-idx1-ubyte,
            t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte
  CIFAR-10  cifar-10-batches-bin/data_batch_{1..5}.bin, test_batch.bin
            (the "CIFAR-10 binary version" archive)
"""


def synth_digits(n: int, seed: int):
    """28x28 images: a bright 4x4 patch whose position encodes the label."""
    rng = rng_stream(seed, 0)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images = rng.integers(0, 40, size=(n, 28, 28)).astype(np.uint8)
    for i, label in enumerate(labels):
        row, col = divmod(int(label), 5)
        r0, c0 = 4 + row * 12, 2 + col * 5
        images[i, r0:r0 + 4, c0:c0 + 4] = 255
    return images, labels


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--out", default="data")
    parser.add_argument("--train", type=int, default=2000)
    parser.add_argument("--test", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    out = Path(args.out)
    for split, count, seed in (("train", args.train, args.seed), ("test", args.test, args.seed + 1)):
        images, labels = synth_digits(count, seed)
        image_name, label_name = MNIST_FILES[split]
        write_idx(out / image_name, images)
        write_idx(out / label_name, labels)
        print(f"Wrote {count} {split} samples to {out}")
    print()
    print(FETCH_HINTS)
    return 0


if __name__ == "__main__":
    sys.exit(main())
