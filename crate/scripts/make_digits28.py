#!/usr/bin/env python3
"""Build a 28x28 handwritten-digit dataset in IDX format.

Source images are the UCI handwritten digits bundled with scikit-learn
(1797 samples, 8x8, 16 gray levels). Each image is upscaled to 28x28 with
bilinear interpolation and augmented with small integer pixel shifts so the
output reaches a useful retrieval-corpus size. Train/test are split at the
level of source images, so no augmented copy of a test digit appears in
train.

Output files (gzipped, IDX magic 0x00000803 / 0x00000801, big-endian):
    data/digits28/train-images-idx3-ubyte.gz
    data/digits28/train-labels-idx1-ubyte.gz
    data/digits28/test-images-idx3-ubyte.gz
    data/digits28/test-labels-idx1-ubyte.gz

The format is byte-compatible with the classic MNIST distribution, so any
IDX loader (including the one in this repository) reads both
interchangeably.
"""

import gzip
import struct
import sys
from pathlib import Path

import numpy as np
from scipy.ndimage import shift as nd_shift
from scipy.ndimage import zoom
from sklearn.datasets import load_digits

SEED = 20240913
TRAIN_ORIGINALS = 1200          # of 1797; the rest become the test pool
TRAIN_COPIES = 6                # original + 5 shifted variants
TEST_COPIES = 4                 # original + 3 shifted variants
MAX_SHIFT = 2                   # pixels, per axis


def upscale(img8: np.ndarray) -> np.ndarray:
    """8x8 float image in [0, 16] -> 28x28 uint8 in [0, 255]."""
    img = zoom(img8, 28 / 8, order=1, prefilter=False)
    img = np.clip(img * (255.0 / 16.0), 0.0, 255.0)
    return img.astype(np.uint8)


def variants(img: np.ndarray, count: int, rng: np.random.Generator) -> list:
    out = [img]
    seen = {(0, 0)}
    while len(out) < count:
        dy, dx = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2)
        if (dy, dx) in seen:
            continue
        seen.add((dy, dx))
        out.append(nd_shift(img, (dy, dx), order=0, cval=0).astype(np.uint8))
    return out


def write_idx_images(path: Path, images: np.ndarray) -> None:
    n, rows, cols = images.shape
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
            f.write(images.tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x00000801, len(labels)))
            f.write(labels.astype(np.uint8).tobytes())


def build_split(indices, copies, images28, labels, rng):
    imgs, labs = [], []
    for i in indices:
        for v in variants(images28[i], copies, rng):
            imgs.append(v)
            labs.append(labels[i])
    imgs = np.stack(imgs)
    labs = np.array(labs, dtype=np.uint8)
    order = rng.permutation(len(imgs))
    return imgs[order], labs[order]


def main() -> None:
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("data/digits28")
    out_dir.mkdir(parents=True, exist_ok=True)

    digits = load_digits()
    rng = np.random.default_rng(SEED)

    images28 = np.stack([upscale(img) for img in digits.images])
    order = rng.permutation(len(images28))
    train_idx = order[:TRAIN_ORIGINALS]
    test_idx = order[TRAIN_ORIGINALS:]

    train_x, train_y = build_split(train_idx, TRAIN_COPIES, images28, digits.target, rng)
    test_x, test_y = build_split(test_idx, TEST_COPIES, images28, digits.target, rng)

    write_idx_images(out_dir / "train-images-idx3-ubyte.gz", train_x)
    write_idx_labels(out_dir / "train-labels-idx1-ubyte.gz", train_y)
    write_idx_images(out_dir / "test-images-idx3-ubyte.gz", test_x)
    write_idx_labels(out_dir / "test-labels-idx1-ubyte.gz", test_y)

    print(f"train: {train_x.shape} -> {out_dir}/train-*.gz")
    print(f"test:  {test_x.shape} -> {out_dir}/test-*.gz")
    counts = np.bincount(test_y, minlength=10)
    print(f"test label counts: {counts.tolist()}")


if __name__ == "__main__":
    main()
