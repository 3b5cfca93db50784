#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the `mnist` npm package into
gzip-compressed IDX files (images + labels).

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_json_to_idx.py package/src/digits data/mnist10k

Each `<d>.json` holds {"data": [...]} with 784 floats per image in [0, 1]
(pixel / 255 rounded to three decimals). Pixels are mapped back to bytes
with round(v * 255). Samples are written grouped by digit, in file order.
"""

import gzip
import json
import struct
import sys
from pathlib import Path


def main() -> None:
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    pixels = bytearray()
    labels = bytearray()
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for v in data:
            pixels.append(max(0, min(255, round(v * 255))))
        labels.extend([digit] * (len(data) // 784))
    n = len(labels)
    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(pixels)
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels)
    print(f"wrote {n} samples to {dst}")


if __name__ == "__main__":
    main()
