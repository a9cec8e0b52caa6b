#!/usr/bin/env python3
"""Convert the digit set shipped in the `mnist` npm package into IDX files.

Usage: mnist_from_npm.py <path-to-unpacked-npm-package> <out-dir>

The npm package stores 10k MNIST digits as per-class JSON arrays of
intensities in [0, 1]. They are shuffled with a fixed seed and split into
8000 train / 2000 test items, written as gzip'd IDX (the standard MNIST
file names).
"""
import gzip
import json
import os
import random
import struct
import sys

TRAIN_COUNT = 8000


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    items = []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as f:
            raw = json.load(f)["data"]
        for s in range(len(raw) // 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in raw[s * 784:(s + 1) * 784])
            items.append((px, digit))
    random.Random(0).shuffle(items)
    os.makedirs(out, exist_ok=True)
    for prefix, chunk in (("train", items[:TRAIN_COUNT]), ("t10k", items[TRAIN_COUNT:])):
        write_idx(os.path.join(out, f"{prefix}-images-idx3-ubyte.gz"), 0x803,
                  (len(chunk), 28, 28), b"".join(p for p, _ in chunk))
        write_idx(os.path.join(out, f"{prefix}-labels-idx1-ubyte.gz"), 0x801,
                  (len(chunk),), bytes(l for _, l in chunk))


if __name__ == "__main__":
    main()
