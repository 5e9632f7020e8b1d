#!/usr/bin/env python3
"""Build the desk-scale MNIST subset in data/mnist-desk from the `mnist` npm package.

The package ships 10,000 real MNIST digits as JSON (784 floats per image, pixel/255
rounded to 3 decimals, so round(v * 255) recovers the original bytes). They are split
per class 80/20 into 8,000 training and 2,000 test images and written as gzipped IDX.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_desk.py package/src/digits data/mnist-desk
"""

import gzip
import json
import struct
import sys
from pathlib import Path


def load_digits(src):
    classes = []
    for digit in range(10):
        values = json.loads((src / f"{digit}.json").read_text())["data"]
        if len(values) % 784:
            sys.exit(f"{digit}.json: length {len(values)} is not a multiple of 784")
        images = []
        for k in range(0, len(values), 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in values[k:k + 784])
            images.append(px)
        classes.append(images)
    return classes


def round_robin(per_class):
    out = []
    longest = max(len(v) for v in per_class)
    for i in range(longest):
        for label, items in enumerate(per_class):
            if i < len(items):
                out.append((label, items[i]))
    return out


def write_idx(dst, stem, pairs):
    images = struct.pack(">IIII", 0x803, len(pairs), 28, 28) + b"".join(p for _, p in pairs)
    labels = struct.pack(">II", 0x801, len(pairs)) + bytes(l for l, _ in pairs)
    for name, payload in ((f"{stem}-images-idx3-ubyte.gz", images), (f"{stem}-labels-idx1-ubyte.gz", labels)):
        with open(dst / name, "wb") as f:
            with gzip.GzipFile(filename="", mode="wb", fileobj=f, mtime=0) as gz:
                gz.write(payload)


def main():
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    classes = load_digits(src)
    train, test = [], []
    for images in classes:
        n_test = round(len(images) * 0.2)
        train.append(images[: len(images) - n_test])
        test.append(images[len(images) - n_test:])
    train_pairs, test_pairs = round_robin(train), round_robin(test)
    write_idx(dst, "train", train_pairs)
    write_idx(dst, "t10k", test_pairs)
    print(f"train {len(train_pairs)}, test {len(test_pairs)}")


if __name__ == "__main__":
    main()
