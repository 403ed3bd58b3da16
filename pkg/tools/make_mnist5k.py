"""Rebuild the bundled 5k MNIST subset as gzipped IDX files.

The source is the ``mnist_5k.csv.gz`` table shipped inside the mlxtend wheel
(500 images per digit, 784 pixel columns followed by the label). The rows are
shuffled with a fixed seed and split per class into 400 training and 100
held-out test images, giving a 4,000-image federated pool and a balanced
1,000-image global test set.

Usage::

    pip download --no-deps mlxtend -d /tmp/wheels
    python tools/make_mnist5k.py /tmp/wheels/mlxtend-*.whl
"""
import argparse
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

OUT_DIR = Path(__file__).resolve().parents[1] / "src" / "fedppa" / "datasets" / "mnist5k"
MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_gz(path, payload):
    # mtime=0 keeps the archive bytes stable across rebuilds
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as fh:
        fh.write(payload)


def idx_images(images):
    n, rows, cols = images.shape
    return struct.pack(">IIII", 0x00000803, n, rows, cols) + images.astype(np.uint8).tobytes()


def idx_labels(labels):
    return struct.pack(">II", 0x00000801, len(labels)) + labels.astype(np.uint8).tobytes()


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("wheel", help="path to an mlxtend wheel")
    parser.add_argument("--out", default=str(OUT_DIR))
    args = parser.parse_args(argv)

    with zipfile.ZipFile(args.wheel) as zf:
        table = np.loadtxt(io.BytesIO(gzip.decompress(zf.read(MEMBER))), delimiter=",")
    pixels = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)

    rng = np.random.default_rng(0)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train_idx.append(idx[:400])
        test_idx.append(idx[400:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_gz(out / "train-images-idx3-ubyte.gz", idx_images(pixels[train_idx]))
    write_gz(out / "train-labels-idx1-ubyte.gz", idx_labels(labels[train_idx]))
    write_gz(out / "test-images-idx3-ubyte.gz", idx_images(pixels[test_idx]))
    write_gz(out / "test-labels-idx1-ubyte.gz", idx_labels(labels[test_idx]))
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test images to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
