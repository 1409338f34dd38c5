#!/usr/bin/env python3
"""Convert the 10k MNIST digits bundled in the `mnist` npm package into
gzip-compressed IDX files (9000 train / 1000 test).

Usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main(src, dst):
    samples = []
    for digit in range(10):
        doc = json.loads(Path(src, f"{digit}.json").read_text())
        data = doc["data"]
        for i in range(0, len(data), 784):
            pixels = [round(v * 255) for v in data[i : i + 784]]
            assert all(0 <= p <= 255 for p in pixels)
            samples.append((pixels, digit))
    random.Random(20181219).shuffle(samples)
    splits = {"train": samples[:9000], "t10k": samples[9000:]}
    Path(dst).mkdir(parents=True, exist_ok=True)
    for name, rows in splits.items():
        images = [p for pixels, _ in rows for p in pixels]
        labels = [d for _, d in rows]
        write_idx(Path(dst, f"{name}-images-idx3-ubyte.gz"), 0x803, [len(rows), 28, 28], images)
        write_idx(Path(dst, f"{name}-labels-idx1-ubyte.gz"), 0x801, [len(rows)], labels)
        print(name, len(rows))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
