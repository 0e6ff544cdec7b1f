#!/usr/bin/env python3
"""Build IDX files from the 10,000 MNIST digits bundled in the npm `mnist` package.

Usage: npm pack mnist && tar xzf mnist-*.tgz && python3 mnist_from_npm.py package data/mnist
"""
import json
import random
import struct
import sys
from pathlib import Path

SIZE = 28 * 28


def main(pkg: Path, out: Path) -> None:
    samples = []
    for digit in range(10):
        raw = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        for i in range(len(raw) // SIZE):
            px = bytes(min(255, max(0, round(v * 255))) for v in raw[i * SIZE:(i + 1) * SIZE])
            samples.append((px, digit))
    random.Random(0).shuffle(samples)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
        for px, _ in samples:
            f.write(px)
    with open(out / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {len(samples)} samples to {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
