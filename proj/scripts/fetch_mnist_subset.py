#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format.

The 5000-example MNIST sample bundled with the `mlxtend` wheel (500 digits per
class) is split per class into 400 train / 100 test examples and written as
standard IDX files:

    <out>/train-images-idx3-ubyte  <out>/train-labels-idx1-ubyte
    <out>/t10k-images-idx3-ubyte   <out>/t10k-labels-idx1-ubyte

Only the wheel is downloaded (via pip); nothing is installed.
"""

import argparse
import gzip
import io
import pathlib
import struct
import subprocess
import sys
import tempfile
import zipfile

import numpy as np

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_csv(cache: pathlib.Path) -> bytes:
    wheels = sorted(cache.glob("mlxtend-*.whl"))
    if not wheels:
        cache.mkdir(parents=True, exist_ok=True)
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "-d", str(cache), "mlxtend"],
            check=True)
        wheels = sorted(cache.glob("mlxtend-*.whl"))
    with zipfile.ZipFile(wheels[-1]) as whl:
        return gzip.decompress(whl.read(CSV_MEMBER))


def write_idx(out: pathlib.Path, stem: str, images: np.ndarray, labels: np.ndarray) -> None:
    n = images.shape[0]
    with open(out / f"{stem}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with open(out / f"{stem}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/mnist")
    parser.add_argument("--cache", default=str(pathlib.Path(tempfile.gettempdir()) / "mlxtend-wheel"))
    parser.add_argument("--train-per-class", type=int, default=400)
    args = parser.parse_args()

    table = np.loadtxt(io.BytesIO(fetch_csv(pathlib.Path(args.cache))), delimiter=",")
    pixels = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.int64)

    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train_idx.extend(idx[: args.train_per_class])
        test_idx.extend(idx[args.train_per_class:])

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out, "train", pixels[train_idx], labels[train_idx])
    write_idx(out, "t10k", pixels[test_idx], labels[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test examples to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
