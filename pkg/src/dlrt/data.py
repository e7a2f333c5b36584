"""MNIST-style IDX ingestion, normalization, and seeded batching.

IDX files are big-endian: a u32 magic (0x00000803 for image tensors,
0x00000801 for label vectors), u32 dimension sizes, then raw unsigned
bytes. Gzip-compressed files are detected by their two magic bytes and
decompressed transparently. Pixels are scaled to [0, 1] as float64.
"""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DataError",
    "Dataset",
    "load_idx_images",
    "load_idx_labels",
    "write_idx_images",
    "write_idx_labels",
    "load_dataset",
    "batches",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(Exception):
    """Malformed IDX input."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N x pixels, float64 in [0, 1]
    labels: np.ndarray  # N ints in [0, 10)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return self.images.shape[0]


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _read_u32s(raw: bytes, count: int, offset: int = 0):
    end = offset + 4 * count
    if len(raw) < end:
        raise DataError("truncated IDX header")
    return struct.unpack(f">{count}I", raw[offset:end])


def load_idx_images(path) -> np.ndarray:
    """Image tensor as an N x (rows*cols) float64 matrix scaled to [0, 1]."""
    raw = _read_bytes(path)
    magic, = _read_u32s(raw, 1)
    if magic != IMAGE_MAGIC:
        raise DataError(f"bad image magic 0x{magic:08x}")
    count, rows, cols = _read_u32s(raw, 3, offset=4)
    pixels = rows * cols
    total = count * pixels
    if total > 2**31:
        raise DataError("IDX dimensions overflow a sane image tensor")
    body = raw[16:]
    if len(body) != total:
        raise DataError(f"expected {total} pixel bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    return data.reshape(count, pixels)


def load_idx_labels(path) -> np.ndarray:
    """Label vector; every entry must be a valid class in [0, 10)."""
    raw = _read_bytes(path)
    magic, = _read_u32s(raw, 1)
    if magic != LABEL_MAGIC:
        raise DataError(f"bad label magic 0x{magic:08x}")
    count, = _read_u32s(raw, 1, offset=4)
    body = raw[8:]
    if len(body) != count:
        raise DataError(f"expected {count} label bytes, found {len(body)}")
    labels = np.frombuffer(body, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise DataError(f"label {labels.max()} out of range [0, 10)")
    return labels


def write_idx_images(path, images: np.ndarray, rows: int, cols: int) -> None:
    """Inverse of load_idx_images; [0,1] floats round back to bytes."""
    count = images.shape[0]
    if images.shape[1] != rows * cols:
        raise DataError(f"images have {images.shape[1]} pixels, expected {rows * cols}")
    body = np.rint(np.asarray(images) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGE_MAGIC, count, rows, cols))
        fh.write(body.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack(">2I", LABEL_MAGIC, len(labels)))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# canonical MNIST filenames, tried with and without .gz
_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_dataset(data_dir, split: str) -> Dataset:
    """Load one split ("train" or "test") from a directory of IDX files."""
    from pathlib import Path

    if split not in _SPLIT_FILES:
        raise ValueError(f"unknown split {split!r}")
    base = Path(data_dir)
    paths = []
    for name in _SPLIT_FILES[split]:
        for candidate in (base / name, base / (name + ".gz")):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise FileNotFoundError(f"missing {name}[.gz] in {base}")
    return Dataset(load_idx_images(paths[0]), load_idx_labels(paths[1]))


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> list:
    """Seeded shuffled mini-batches covering the dataset exactly once.

    The permutation is keyed by seed XOR epoch so every epoch reshuffles
    deterministically. The last batch keeps the remainder.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.random.default_rng(seed ^ epoch).permutation(n)
    out = []
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        out.append((dataset.images[idx], dataset.labels[idx]))
    return out
