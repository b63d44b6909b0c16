"""MNIST ingestion from local IDX files and deterministic subsetting."""
from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
NUM_CLASSES = 10


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (count, 784) uint8
    labels: np.ndarray  # (count,) uint8
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise DataFormatError("labels must lie in [0, 9]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def pixels(self) -> np.ndarray:
        """Images scaled to [0, 1]."""
        return self.images.astype(np.float64) / 255.0

    def take(self, index, split: str | None = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], split or self.split)


def _read(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, magic: int) -> np.ndarray:
    """Parse one big-endian IDX file of unsigned bytes."""
    raw = _read(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: too short for an IDX header")
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise DataFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated dimension header")
    dims = tuple(int.from_bytes(raw[4 + 4 * k:8 + 4 * k], "big") for k in range(ndim))
    size = int(np.prod(dims))
    if len(raw) - head != size:
        raise DataFormatError(f"{path}: payload has {len(raw) - head} bytes, dimensions {dims} need {size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(images.reshape(images.shape[0], -1).copy(), labels.copy(), split)


def write_idx(path, array, magic: int) -> None:
    """Write an unsigned-byte IDX file (fixtures and exports)."""
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim != (magic & 0xFF):
        raise DataFormatError(f"array rank {array.ndim} does not match magic 0x{magic:08x}")
    head = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    Path(path).write_bytes(head + array.tobytes(order="C"))


def subsample(dataset: Dataset, k: int, seed: int, stratified: bool = False) -> Dataset:
    """Deterministic subset of ``k`` items; stratified keeps classes within one of each other."""
    count = len(dataset)
    if k > count:
        raise ValueError(f"cannot take {k} items from a dataset of {count}")
    rng = np.random.default_rng([int(seed), 0x5AB])
    if not stratified:
        return dataset.take(np.sort(rng.permutation(count)[:k]))
    classes = np.unique(dataset.labels)
    pools = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in classes]
    base, extra = divmod(k, len(classes))
    # the first `extra` classes in a seeded order get one more item
    order = rng.permutation(len(classes))
    want = np.full(len(classes), base)
    want[order[:extra]] += 1
    if any(w > len(p) for w, p in zip(want, pools)):
        raise ValueError("class too small for a balanced subset of this size")
    index = np.concatenate([p[:w] for p, w in zip(pools, want)])
    return dataset.take(np.sort(index))


def split(dataset: Dataset, holdout: int, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint ``(rest, holdout)`` partition, e.g. train/validation."""
    if not 0 <= holdout <= len(dataset):
        raise ValueError(f"holdout {holdout} outside [0, {len(dataset)}]")
    perm = np.random.default_rng([int(seed), 0x5B1]).permutation(len(dataset))
    return (dataset.take(np.sort(perm[holdout:])),
            dataset.take(np.sort(perm[:holdout]), split="val"))
