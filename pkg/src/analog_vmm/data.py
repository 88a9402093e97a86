"""MNIST ingestion from IDX files (optionally gzip-compressed)."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestionError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DATA_ENV = "ANALOG_VMM_MNIST"


@dataclass
class Dataset:
    images: np.ndarray  # (n, 28, 28) uint8
    labels: np.ndarray  # (n,) uint8
    split: str = ""

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.split)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"{path}: truncated header", field="header")
    found = struct.unpack_from(">I", raw)[0]
    if found != magic:
        raise IngestionError(f"{path}: magic number {found:#010x}, expected {magic:#010x}", field="magic")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise IngestionError(f"{path}: header announces {dims[0]} items but the file is truncated", field="count")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def load_mnist(images_path, labels_path, split: str = "") -> Dataset:
    """Parse an IDX image file and its label file, validating headers and ranges."""
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IngestionError(f"{len(images)} images but {len(labels)} labels", field="count")
    if labels.size and labels.max() > 9:
        raise IngestionError(f"label {int(labels.max())} outside 0-9", field="labels")
    return Dataset(images, labels, split)


def find_mnist_dir(explicit=None) -> Path | None:
    """First directory holding all four IDX files. A location given explicitly or
    through the environment is the only one searched, so a typo never falls back."""
    named = explicit or os.environ.get(DATA_ENV)
    candidates = [named] if named else [Path.cwd() / "data" / "mnist",
                                        Path(__file__).resolve().parents[2] / "data" / "mnist"]
    for c in candidates:
        if c and all(_exists(Path(c) / name) for pair in MNIST_FILES.values() for name in pair):
            return Path(c)
    return None


def _exists(path: Path) -> bool:
    return path.exists() or path.with_name(path.name + ".gz").exists()


def _resolve(path: Path) -> Path:
    return path if path.exists() else path.with_name(path.name + ".gz")


def load_split(split: str, directory=None) -> Dataset:
    root = find_mnist_dir(directory)
    if root is None:
        raise IngestionError(f"MNIST files not found; set {DATA_ENV} or place them under data/mnist", field="path")
    images, labels = MNIST_FILES[split]
    return load_mnist(_resolve(root / images), _resolve(root / labels), split)


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Inverse of the reader; used for fixtures and data export."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())
