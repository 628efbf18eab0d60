"""MNIST IDX ingestion, normalization, binarization, and batching.

Files are read fully into memory (MNIST is ~55 MB uncompressed). Gzipped
files are accepted transparently: the loader sniffs the two-byte gzip magic
instead of trusting the file name. Nothing here downloads data; paths must
point at existing IDX files.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bitcore import BitVector, binarize_real

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
IMAGE_SIDE = 28
PIXELS = IMAGE_SIDE * IMAGE_SIDE
NUM_CLASSES = 10

# canonical file names inside a data directory
TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


class IdxFormatError(ValueError):
    """Malformed IDX container. Carries the byte offset of the problem."""

    def __init__(self, message: str, path, offset: int):
        super().__init__(f"{path}: {message} (at byte offset {offset})")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    """Immutable image/label pairs for one split."""

    images: np.ndarray  # (N, 28, 28) uint8
    labels: np.ndarray  # (N,) uint8, values 0..9
    split: str  # "train" or "test"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"image/label count mismatch: {self.images.shape[0]} vs {self.labels.shape[0]}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise ValueError("labels must be in [0, 9]")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(), self.split)


def _read_file(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes, path, expected_magic: int, n_dims: int):
    header_len = 4 * (1 + n_dims)
    if len(raw) < header_len:
        raise IdxFormatError(
            f"truncated header, need {header_len} bytes, have {len(raw)}", path, len(raw)
        )
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(
            f"bad magic {magic}, expected {expected_magic}", path, 0
        )
    dims = struct.unpack(f">{n_dims}I", raw[4:header_len])
    return dims, header_len


def load_idx(images_path, labels_path, split: str = "test") -> Dataset:
    """Parse a big-endian IDX image/label file pair into a Dataset.

    Images: magic 2051, u32 count, u32 rows, u32 cols, raw pixel bytes.
    Labels: magic 2049, u32 count, raw label bytes.
    """
    img_raw = _read_file(images_path)
    (n_img, rows, cols), img_off = _parse_header(img_raw, images_path, IMAGES_MAGIC, 3)
    if (rows, cols) != (IMAGE_SIDE, IMAGE_SIDE):
        raise IdxFormatError(
            f"unexpected image dimensions {rows}x{cols}, expected 28x28", images_path, 8
        )
    need = img_off + n_img * rows * cols
    if len(img_raw) < need:
        raise IdxFormatError(
            f"truncated image payload, need {need} bytes, have {len(img_raw)}",
            images_path,
            len(img_raw),
        )
    images = np.frombuffer(img_raw, dtype=np.uint8, count=n_img * rows * cols, offset=img_off)
    images = images.reshape(n_img, rows, cols).copy()

    lbl_raw = _read_file(labels_path)
    (n_lbl,), lbl_off = _parse_header(lbl_raw, labels_path, LABELS_MAGIC, 1)
    need = lbl_off + n_lbl
    if len(lbl_raw) < need:
        raise IdxFormatError(
            f"truncated label payload, need {need} bytes, have {len(lbl_raw)}",
            labels_path,
            len(lbl_raw),
        )
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, count=n_lbl, offset=lbl_off).copy()

    if n_img != n_lbl:
        raise IdxFormatError(
            f"image count {n_img} does not match label count {n_lbl}", labels_path, 4
        )
    return Dataset(images, labels, split)


def dump_idx(dataset: Dataset, images_path, labels_path):
    """Serialize a Dataset back to raw IDX bytes (fixture/round-trip helper)."""
    n = len(dataset)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, IMAGE_SIDE, IMAGE_SIDE))
        f.write(dataset.images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, n))
        f.write(dataset.labels.tobytes())


def load_dir(data_dir, split: str) -> Dataset:
    """Load a split from a directory of canonically named files (.gz allowed)."""
    names = {
        "train": (TRAIN_IMAGES, TRAIN_LABELS),
        "test": (TEST_IMAGES, TEST_LABELS),
    }[split]
    paths = []
    for name in names:
        plain = Path(data_dir) / name
        gz = Path(data_dir) / (name + ".gz")
        if plain.exists():
            paths.append(plain)
        elif gz.exists():
            paths.append(gz)
        else:
            raise FileNotFoundError(f"missing {name}[.gz] in {data_dir}")
    return load_idx(paths[0], paths[1], split)


def normalize(image) -> np.ndarray:
    """Flatten a 28x28 u8 grid row-major and map pixels to [-1, 1].

    output[i] = pixel[i] / 127.5 - 1, so 0 -> -1.0 and 255 -> +1.0.
    """
    arr = np.asarray(image, dtype=np.float64).reshape(-1)
    return arr / 127.5 - 1.0


def binarize_image(image) -> BitVector:
    """Binarized 784-bit image: bit 1 iff pixel >= 128."""
    return binarize_real(normalize(image))


def binarize_images_pm1(images: np.ndarray) -> np.ndarray:
    """Batch variant: (N, 28, 28) u8 -> (N, 784) int8 of -1/+1 values."""
    flat = images.reshape(images.shape[0], -1)
    return np.where(flat >= 128, 1, -1).astype(np.int8)


def verification_indices(test: Dataset) -> np.ndarray:
    """Indices of the first 10 occurrences of each digit, digit-major order."""
    picks = []
    for digit in range(NUM_CLASSES):
        idx = np.flatnonzero(test.labels == digit)[:10]
        if idx.size < 10:
            raise ValueError(f"fewer than 10 samples of digit {digit} (found {idx.size})")
        picks.append(idx)
    return np.concatenate(picks)


def select_verification_set(test: Dataset) -> Dataset:
    """Deterministic 100-sample suite: first 10 of each digit by index order."""
    return test.subset(verification_indices(test))


class BatchPlan:
    """Deterministic epoch shuffling.

    Each epoch's order is a fresh permutation drawn from a PCG64 stream
    seeded by (seed, epoch), so the full permutation sequence is fixed by
    the seed and any epoch can be regenerated independently.
    """

    def __init__(self, n: int, batch_size: int, seed: int):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        if n < 1:
            raise ValueError("need at least one sample")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed

    def epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, epoch])))
        return rng.permutation(self.n)

    def batches(self, epoch: int):
        """Yield index arrays covering every sample exactly once."""
        order = self.epoch_order(epoch)
        for start in range(0, self.n, self.batch_size):
            yield order[start : start + self.batch_size]

    def steps_per_epoch(self) -> int:
        return (self.n + self.batch_size - 1) // self.batch_size
