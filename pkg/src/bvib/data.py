"""MNIST IDX parsing, a synthetic Gaussian-blob stand-in, and per-pair sharding."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngs
from .errors import ConfigError, ParseError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (M, D) float64 in [0, 1]
    labels: np.ndarray  # (M,) int64 in [0, 9]
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split)


@dataclass(frozen=True)
class Shard:
    pair_id: int
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def batches(self, num_batches: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
        """Split into ``num_batches`` equal batches; the remainder is dropped.

        With ``rng`` the shard is reshuffled first.  A shard smaller than
        ``num_batches`` yields one single-item batch per sample.
        """
        if num_batches < 1:
            raise ConfigError("num_batches must be >= 1")
        idx = self.indices if rng is None else rng.permutation(self.indices)
        size = len(idx) // num_batches
        if size == 0:
            return [idx[i : i + 1] for i in range(len(idx))]
        return [idx[i * size : (i + 1) * size] for i in range(num_batches)]


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(buf: bytes, ndims: int, magic: int, what: str) -> tuple[int, ...]:
    need = 4 * (ndims + 1)
    if len(buf) < need:
        raise ParseError(f"{what}: truncated header ({len(buf)} bytes, need {need})")
    found = struct.unpack_from(">I", buf, 0)[0]
    if found != magic:
        raise ParseError(f"{what}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndims}I", buf, 4)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    img_buf = _read(images_path)
    lab_buf = _read(labels_path)
    n_img, rows, cols = _header(img_buf, 3, IMAGES_MAGIC, "images")
    (n_lab,) = _header(lab_buf, 1, LABELS_MAGIC, "labels")
    if n_img != n_lab:
        raise ParseError(f"count mismatch: {n_img} images vs {n_lab} labels")
    pix = n_img * rows * cols
    if len(img_buf) - 16 < pix:
        raise ParseError(f"images: truncated at offset {len(img_buf)}, expected {16 + pix} bytes")
    if len(lab_buf) - 8 < n_lab:
        raise ParseError(f"labels: truncated at offset {len(lab_buf)}, expected {8 + n_lab} bytes")
    images = np.frombuffer(img_buf, dtype=np.uint8, count=pix, offset=16).reshape(n_img, rows * cols)
    labels = np.frombuffer(lab_buf, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise ParseError(f"labels: value {labels.max()} out of range [0, 9]")
    return Dataset(images.astype(np.float64) / 255.0, labels, split)


def write_idx(ds: Dataset, images_path, labels_path, shape: tuple[int, int] = (28, 28)) -> None:
    """Serialize back to IDX (pixels re-quantized to uint8)."""
    rows, cols = shape
    if ds.images.shape[1] != rows * cols:
        raise ConfigError(f"image width {ds.images.shape[1]} != {rows}x{cols}")
    pixels = np.rint(ds.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, len(ds), rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(ds)))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_mnist_dir(directory) -> tuple[Dataset, Dataset]:
    """Load the four standard MNIST files (optionally ``.gz``) from a directory."""
    directory = Path(directory)
    out = []
    for split, names in MNIST_FILES.items():
        paths = []
        for name in names:
            for candidate in (directory / name, directory / f"{name}.gz"):
                if candidate.exists():
                    paths.append(candidate)
                    break
            else:
                raise FileNotFoundError(f"{name} not found in {directory}")
        out.append(load_idx(*paths, split=split))
    return out[0], out[1]


def make_synthetic(classes: int = 10, dim: int = 784, per_class: int = 100, seed: int = 0,
                   noise: float = 1.0, split: str = "train") -> Dataset:
    """Gaussian blobs around one random center per class, clipped to [0, 1].

    Centers depend only on ``seed``; train and test splits draw independent
    noise around the same centers.
    """
    if classes < 1 or dim < 1 or per_class < 0:
        raise ConfigError("classes and dim must be positive, per_class non-negative")
    centers = class_centers(classes, dim, seed)
    g = rngs.stream(seed, "data", 1 if split == "train" else 2)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    images = centers[labels] + noise * g.standard_normal((labels.size, dim))
    order = g.permutation(labels.size)
    return Dataset(np.clip(images[order], 0.0, 1.0), labels[order], split)


def class_centers(classes: int = 10, dim: int = 784, seed: int = 0) -> np.ndarray:
    return rngs.stream(seed, "data", 0).uniform(0.0, 1.0, size=(classes, dim))


def shard(ds: Dataset, pairs: int, seed: int) -> list[Shard]:
    """Seeded shuffle, then a near-equal contiguous split (sizes differ by at most one)."""
    if pairs < 1:
        raise ConfigError("pairs must be >= 1")
    if pairs > len(ds):
        raise ConfigError(f"cannot shard {len(ds)} samples across {pairs} pairs")
    perm = rngs.stream(seed, "shard", 0 if ds.split == "train" else 1).permutation(len(ds))
    return [Shard(i, part) for i, part in enumerate(np.array_split(perm, pairs))]
