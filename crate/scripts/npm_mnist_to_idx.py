#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package into gzipped IDX files.

The npm package (https://github.com/cazala/mnist) ships the first 10,000
images of the MNIST training set as per-digit JSON arrays of pixel/255 values
rounded to three decimals. Rounding back to the nearest byte recovers the
original pixels exactly.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/npm_mnist_to_idx.py package/src/digits data/mnist-desk

Writes train-{images-idx3,labels-idx1}-ubyte.gz (9,000 images) and
t10k-{images-idx3,labels-idx1}-ubyte.gz (1,000 held-out images). The split is
a seeded shuffle so it is reproducible.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TEST_COUNT = 1000
SPLIT_SEED = 0


def load(digits_dir):
    samples = []
    for digit in range(10):
        data = json.loads((digits_dir / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(0, len(data), 784):
            pixels = bytes(int(round(v * 255)) for v in data[i:i + 784])
            samples.append((pixels, digit))
    return samples


def write_idx(out_dir, prefix, samples):
    images = struct.pack(">IIII", 0x00000803, len(samples), 28, 28)
    images += b"".join(p for p, _ in samples)
    labels = struct.pack(">II", 0x00000801, len(samples)) + bytes(d for _, d in samples)
    # mtime=0 keeps the gzip output byte-stable
    with open(out_dir / f"{prefix}-images-idx3-ubyte.gz", "wb") as f:
        f.write(gzip.compress(images, mtime=0))
    with open(out_dir / f"{prefix}-labels-idx1-ubyte.gz", "wb") as f:
        f.write(gzip.compress(labels, mtime=0))


def main():
    digits_dir, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = load(digits_dir)
    random.Random(SPLIT_SEED).shuffle(samples)
    write_idx(out_dir, "train", samples[TEST_COUNT:])
    write_idx(out_dir, "t10k", samples[:TEST_COUNT])
    print(f"train={len(samples) - TEST_COUNT} test={TEST_COUNT}")


if __name__ == "__main__":
    main()
