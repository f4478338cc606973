#!/usr/bin/env python3
"""Build the bundled 10k MNIST subset as gzipped IDX files.

Source: the `mnist` npm package (src/digits/<class>.json, 784 floats in
[0, 1] per digit, three decimals). Pixels are mapped back to bytes with
round(v * 255). Records are written in a fixed-seed shuffled order so that
any prefix/suffix split is class-balanced.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/build_mnist_subset.py package/src/digits data/mnist-10k
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    records = []
    for label in range(10):
        flat = json.loads((src / f"{label}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(len(flat) // 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784])
            records.append((px, label))
    random.Random(20190602).shuffle(records)
    n = len(records)
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for px, _ in records:
            f.write(px)
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in records))
    print(f"wrote {n} records to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
