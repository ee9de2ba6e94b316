#!/usr/bin/env python3
"""Rebuild the CIFAR-10 binary batches from the `tfjs-cifar10` npm package.

The npm package ships every batch as a lossless PNG (one image per row,
1024 RGB pixels wide) plus JSON label lists. This writes the standard
`cifar-10-batches-bin/` layout (1 label byte + 3072 CHW bytes per record).

    npm pack tfjs-cifar10 && tar xzf tfjs-cifar10-*.tgz
    python3 tools/cifar10_from_tfjs.py package "$RECDET_CACHE"
"""
import argparse
import hashlib
import json
import pathlib

import numpy as np
from PIL import Image


def write_batch(png, labels, out):
    pixels = np.asarray(Image.open(png).convert("RGB"), dtype=np.uint8)
    pixels = pixels.reshape(len(labels), 32, 32, 3).transpose(0, 3, 1, 2)
    records = np.empty((len(labels), 3073), dtype=np.uint8)
    records[:, 0] = np.asarray(labels, dtype=np.uint8)
    records[:, 1:] = pixels.reshape(len(labels), 3072)
    out.write_bytes(records.tobytes())
    return hashlib.sha256(out.read_bytes()).hexdigest()


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("package_dir", type=pathlib.Path)
    parser.add_argument("cache_dir", type=pathlib.Path)
    args = parser.parse_args()

    dest = args.cache_dir / "cifar-10-batches-bin"
    dest.mkdir(parents=True, exist_ok=True)
    train = json.loads((args.package_dir / "train_lables.json").read_text())
    test = json.loads((args.package_dir / "test_lables.json").read_text())

    for i in range(5):
        name = f"data_batch_{i + 1}.bin"
        digest = write_batch(args.package_dir / f"data_batch_{i + 1}.png",
                             train[i * 10000:(i + 1) * 10000], dest / name)
        print(digest, name)
    print(write_batch(args.package_dir / "test_batch.png", test, dest / "test_batch.bin"), "test_batch.bin")
    names = ["airplane", "automobile", "bird", "cat", "deer",
             "dog", "frog", "horse", "ship", "truck"]
    (dest / "batches.meta.txt").write_text("\n".join(names) + "\n")


if __name__ == "__main__":
    main()
