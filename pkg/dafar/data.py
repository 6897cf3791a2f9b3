# dafar/data.py
# Dataset ingestion: MNIST IDX files and CIFAR-10 binary batches -> ImageBatch.
#
# CONTRACT:
# - No model code, no config parsing.
# - Pixels are scaled from [0,255] bytes to [-1,1] via v / 127.5 - 1.
# - Ordering within a split is the file order (deterministic).
# - Missing file, bad magic and truncated record each raise their own error.

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from dafar.errors import BadMagicError, DatasetFileMissingError, ShapeMismatchError, TruncatedRecordError


DATASET_SHAPES = {
    "mnist": (1, 28, 28),
    "cifar10": (3, 32, 32),
}
NUM_CLASSES = 10

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_COUNTS = {"train": 60000, "test": 10000}

CIFAR_RECORD_BYTES = 1 + 32 * 32 * 3
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


# ----------------------------
# ImageBatch
# ----------------------------

@dataclass(frozen=True)
class ImageBatch:
    """
    Normalized images (batch, channels, height, width) in [-1,1] with labels.

    `provenance` records where the pixels came from ("clean", "noise",
    "adversarial:<method>", ...). Detector training only accepts "clean".
    """
    pixels: torch.Tensor
    labels: torch.Tensor
    provenance: str = "clean"

    def __post_init__(self) -> None:
        if self.pixels.dim() != 4:
            raise ShapeMismatchError(f"pixels must be 4-D (batch, C, H, W), got shape {tuple(self.pixels.shape)}")
        if self.labels.dim() != 1 or self.labels.shape[0] != self.pixels.shape[0]:
            raise ShapeMismatchError(f"labels length {tuple(self.labels.shape)} does not match batch size "
                                     f"{self.pixels.shape[0]}")
        if self.pixels.numel() > 0:
            if not torch.isfinite(self.pixels).all():
                raise ValueError("pixels must be finite")
            if self.pixels.min() < -1.0 or self.pixels.max() > 1.0:
                raise ValueError("pixels must lie in [-1, 1]")

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def sample_shape(self) -> Tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])  # type: ignore[return-value]

    def subset(self, index) -> "ImageBatch":
        if isinstance(index, slice):
            return ImageBatch(self.pixels[index], self.labels[index], self.provenance)
        index = torch.as_tensor(index, dtype=torch.long)
        return ImageBatch(self.pixels[index], self.labels[index], self.provenance)

    def take(self, n: int) -> "ImageBatch":
        return self.subset(slice(0, min(n, len(self))))

    def with_pixels(self, pixels: torch.Tensor, provenance: str) -> "ImageBatch":
        return ImageBatch(pixels.detach(), self.labels.clone(), provenance)

    def batches(self, batch_size: int, shuffle_seed: Optional[int] = None) -> Iterator["ImageBatch"]:
        """Yield consecutive sub-batches; shuffled deterministically if a seed is given."""
        n = len(self)
        if shuffle_seed is None:
            order = torch.arange(n)
        else:
            gen = torch.Generator().manual_seed(shuffle_seed)
            order = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            yield self.subset(order[start:start + batch_size])

    def to(self, device: torch.device | str) -> "ImageBatch":
        return replace(self, pixels=self.pixels.to(device), labels=self.labels.to(device))


def concat_batches(batches: Sequence[ImageBatch], provenance: Optional[str] = None) -> ImageBatch:
    if not batches:
        raise ValueError("cannot concatenate an empty list of batches")
    return ImageBatch(
        torch.cat([b.pixels for b in batches]),
        torch.cat([b.labels for b in batches]),
        provenance or batches[0].provenance,
    )


def batch_hash(batch: ImageBatch) -> str:
    """SHA-256 over pixel and label bytes, for run manifests."""
    h = hashlib.sha256()
    h.update(batch.pixels.detach().cpu().contiguous().numpy().tobytes())
    h.update(batch.labels.detach().cpu().contiguous().numpy().astype(np.int64).tobytes())
    return h.hexdigest()


def normalize_bytes(raw: np.ndarray) -> torch.Tensor:
    """uint8 [0,255] -> float32 [-1,1]."""
    return torch.from_numpy(raw.astype(np.float32) / 127.5 - 1.0)


# ----------------------------
# Public API
# ----------------------------

def load_dataset(name: str, split: str, root_path: Path) -> ImageBatch:
    """Load a full split of a dataset from its raw binary files under root_path."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test' (got {split!r})")
    if name == "mnist":
        return _load_mnist(split, Path(root_path))
    if name == "cifar10":
        return _load_cifar10(split, Path(root_path))
    raise ValueError(f"Unknown dataset {name!r}. Available: {sorted(DATASET_SHAPES)}")


# ----------------------------
# MNIST (IDX)
# ----------------------------

def _load_mnist(split: str, root: Path) -> ImageBatch:
    images_name, labels_name = MNIST_FILES[split]
    images = read_idx_images(_resolve(root, images_name))
    labels = read_idx_labels(_resolve(root, labels_name))
    if images.shape[0] != labels.shape[0]:
        raise TruncatedRecordError(f"MNIST {split}: {images.shape[0]} images but {labels.shape[0]} labels")
    return ImageBatch(
        pixels=normalize_bytes(images).unsqueeze(1),
        labels=torch.from_numpy(labels.astype(np.int64)),
    )


def read_idx_images(path: Path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 16:
        raise TruncatedRecordError(f"{path}: header shorter than 16 bytes")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(f"{path}: expected magic 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}")
    expected = 16 + count * rows * cols
    if len(data) < expected:
        raise TruncatedRecordError(f"{path}: expected {expected} bytes for {count} images, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def read_idx_labels(path: Path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 8:
        raise TruncatedRecordError(f"{path}: header shorter than 8 bytes")
    magic, count = struct.unpack(">II", data[:8])
    if magic != IDX_LABELS_MAGIC:
        raise BadMagicError(f"{path}: expected magic 0x{IDX_LABELS_MAGIC:08x}, got 0x{magic:08x}")
    if len(data) < 8 + count:
        raise TruncatedRecordError(f"{path}: expected {count} labels, got {len(data) - 8}")
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=8)
    if labels.size and labels.max() >= NUM_CLASSES:
        raise ValueError(f"{path}: label {labels.max()} outside [0, {NUM_CLASSES - 1}]")
    return labels


# ----------------------------
# CIFAR-10 (binary batches)
# ----------------------------

def _load_cifar10(split: str, root: Path) -> ImageBatch:
    # Accept both <root>/*.bin and the extracted archive's <root>/cifar-10-batches-bin/*.bin.
    if not (root / CIFAR_FILES[split][0]).exists() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"

    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for name in CIFAR_FILES[split]:
        img, lab = read_cifar_batch(_resolve(root, name))
        images.append(img)
        labels.append(lab)

    return ImageBatch(
        pixels=normalize_bytes(np.concatenate(images)),
        labels=torch.from_numpy(np.concatenate(labels).astype(np.int64)),
    )


def read_cifar_batch(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """One 3073-byte record per image: label byte, then 3072 pixel bytes (R, G, B planes)."""
    data = _read_bytes(path)
    if len(data) % CIFAR_RECORD_BYTES != 0:
        raise TruncatedRecordError(f"{path}: size {len(data)} is not a multiple of {CIFAR_RECORD_BYTES}")
    count = len(data) // CIFAR_RECORD_BYTES
    if count != CIFAR_RECORDS_PER_FILE:
        raise TruncatedRecordError(f"{path}: expected {CIFAR_RECORDS_PER_FILE} records, got {count}")

    records = np.frombuffer(data, dtype=np.uint8).reshape(count, CIFAR_RECORD_BYTES)
    labels = records[:, 0].copy()
    if labels.max() >= NUM_CLASSES:
        raise ValueError(f"{path}: label {labels.max()} outside [0, {NUM_CLASSES - 1}]")
    images = records[:, 1:].reshape(count, 3, 32, 32)
    return images, labels


# ----------------------------
# File helpers
# ----------------------------

def _resolve(root: Path, name: str) -> Path:
    """Prefer the raw file, fall back to its .gz download."""
    plain = root / name
    if plain.is_file():
        return plain
    gz = root / f"{name}.gz"
    if gz.is_file():
        return gz
    raise DatasetFileMissingError(f"Dataset file not found: {plain} (or {gz.name})")


def _read_bytes(path: Path) -> bytes:
    if not path.is_file():
        raise DatasetFileMissingError(f"Dataset file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()
