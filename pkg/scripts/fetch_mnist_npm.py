#!/usr/bin/env python3
"""Build a 10,000-digit MNIST pool in IDX format from the ``mnist`` npm package.

The package ships 10k real MNIST digits as per-class JSON arrays of
28x28 intensities in [0, 1] (rounded to 3 decimals). They are re-quantized to
uint8, shuffled with a fixed seed and written as gzipped IDX files:

    <out>/mnist-10k/images-idx3-ubyte.gz
    <out>/mnist-10k/labels-idx1-ubyte.gz

Usage: python scripts/fetch_mnist_npm.py [--out data] [--tarball mnist-1.1.0.tgz]
"""
import argparse
import json
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from dticluster.data import write_idx


def read_tarball(path):
    images, labels = [], []
    with tarfile.open(path) as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            flat = np.asarray(json.load(member)["data"], dtype=np.float64)
            imgs = np.rint(flat.reshape(-1, 28, 28) * 255).astype(np.uint8)
            images.append(imgs)
            labels.append(np.full(len(imgs), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data")
    ap.add_argument("--tarball", help="local mnist-*.tgz; fetched with `npm pack` if omitted")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball
        if tarball is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0", "--silent"], cwd=tmp, check=True)
            tarball = next(Path(tmp).glob("mnist-*.tgz"))
        images, labels = read_tarball(tarball)
    order = np.random.default_rng(0).permutation(len(images))
    out = Path(args.out) / "mnist-10k"
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "images-idx3-ubyte.gz", images[order])
    write_idx(out / "labels-idx1-ubyte.gz", labels[order])
    print(f"wrote {len(images)} digits to {out}; class counts {np.bincount(labels).tolist()}")


if __name__ == "__main__":
    main()
