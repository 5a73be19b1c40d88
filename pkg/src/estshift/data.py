"""MNIST IDX ingestion and deterministic subsampling."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, CountMismatchError, DataError, TruncatedFileError
from .tensor import RngState, Tensor, rng_permutation

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: Tensor  # [n, 1, 28, 28], pixels in [0, 1]
    labels: np.ndarray  # int64 [n]
    name: str = ""

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatchError("count mismatch between images and labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def flat(self) -> Tensor:
        return self.images.reshape(len(self), -1)

    def take(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], name or self.name)


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e


def _header(buf: bytes, n_words: int, magic: int, path: str) -> tuple[int, ...]:
    if len(buf) < 4 * n_words:
        raise TruncatedFileError(f"truncated IDX header in {path}")
    words = struct.unpack(f">{n_words}I", buf[:4 * n_words])
    if words[0] != magic:
        raise BadMagicError(f"bad magic 0x{words[0]:08x} in {path} (expected 0x{magic:08x})")
    return words[1:]


def read_idx_images(path: str) -> np.ndarray:
    buf = _read(path)
    n, rows, cols = _header(buf, 4, IMAGE_MAGIC, path)
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise TruncatedFileError(f"truncated image data in {path}: {len(buf)} < {need} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def read_idx_labels(path: str) -> np.ndarray:
    buf = _read(path)
    (n,) = _header(buf, 2, LABEL_MAGIC, path)
    if len(buf) < 8 + n:
        raise TruncatedFileError(f"truncated label data in {path}: {len(buf)} < {8 + n} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8)


def load_mnist_idx(images_path: str, labels_path: str, name: str = "") -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    if labels.size and labels.max() >= 10:
        raise DataError(f"label {labels.max()} out of range in {labels_path}")
    x = (images.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), name or os.path.basename(images_path))


def load_mnist(data_dir: str, split: str = "test") -> Dataset:
    img, lab = MNIST_FILES[split]
    return load_mnist_idx(os.path.join(data_dir, img), os.path.join(data_dir, lab), f"mnist-{split}")


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """``n`` examples drawn uniformly without replacement; deterministic in ``seed``."""
    if not 1 <= n <= len(ds):
        raise ValueError(f"subsample size {n} out of range [1, {len(ds)}]")
    idx = rng_permutation(RngState(seed).split(n), len(ds))[:n]
    return ds.take(idx, f"{ds.name}[{n}@{seed}]")
