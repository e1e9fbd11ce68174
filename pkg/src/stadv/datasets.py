"""MNIST (IDX) and CIFAR-10 (binary batch) readers.

Parsers validate the whole file before returning anything; any structural
problem raises :class:`FormatError` carrying the path and byte offset.
Pixels are scaled to [0, 1].
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "FormatError",
    "read_idx",
    "write_idx",
    "load_mnist",
    "load_cifar10",
    "read_cifar10_batch",
    "write_mnist_subset",
    "MNIST_FILES",
]

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class FormatError(ValueError):
    """A dataset file is structurally invalid."""

    def __init__(self, path, offset, reason):
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        super().__init__(f"{self.path}: byte {offset}: {reason}")


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = ""
    checksum: str = ""
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, start, stop=None):
        sl = slice(start, stop)
        return Dataset(self.images[sl], self.labels[sl], self.split, self.checksum, self.num_classes)


def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            return gzip.decompress(gz.read_bytes())
        raise FileNotFoundError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic=None):
    """Parse an unsigned-byte IDX file into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(path, 0, f"file too short for an IDX header ({len(raw)} bytes)")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    magic = struct.unpack(">I", raw[:4])[0]
    if zero != 0 or dtype_code != 0x08 or ndim == 0:
        raise FormatError(path, 0, f"bad magic 0x{magic:08x}")
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(path, 0, f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(path, len(raw), f"truncated header: need {header} bytes for {ndim} dims")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) < need:
        raise FormatError(path, len(raw), f"truncated payload: dims {dims} need {need} bytes")
    if len(raw) > need:
        raise FormatError(path, need, f"{len(raw) - need} trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as IDX (magic 0x0801 for 1-d, 0x0803 for 3-d, ...)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    head = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + array.tobytes())


def load_mnist(directory, split="train", limit=None):
    """Read ``<split>`` images and labels from IDX files in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    img_name, lbl_name = MNIST_FILES[split]
    img_path, lbl_path = directory / img_name, directory / lbl_name
    images = read_idx(img_path, IDX_IMAGES)
    labels = read_idx(lbl_path, IDX_LABELS)
    if images.shape[1:] != (28, 28):
        raise FormatError(img_path, 8, f"expected 28x28 images, got {images.shape[1:]}")
    if len(images) != len(labels):
        raise FormatError(lbl_path, 4, f"{len(labels)} labels for {len(images)} images")
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(lbl_path, 8 + int(bad[0]), f"label value {labels[bad[0]]} outside 0..9")
    digest = hashlib.sha256(images.tobytes() + labels.tobytes()).hexdigest()
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(
        images.astype(np.float64)[..., None] / 255.0,
        labels.astype(np.int64),
        split=f"mnist-{split}",
        checksum=digest,
    )


def read_cifar10_batch(path):
    """Decode one binary batch: per record 1 label byte + 3072 planar pixels."""
    raw = _read_bytes(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(path, len(raw), f"size {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(path, int(bad[0]) * CIFAR_RECORD, f"label value {labels[bad[0]]} outside 0..9")
    images = recs[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, labels


def load_cifar10(directory, split="train", limit=None):
    directory = Path(directory)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    paths = [directory / n for n in names if (directory / n).exists()]
    if not paths:
        raise FileNotFoundError(f"no CIFAR-10 {split} batches in {directory}")
    parts = [read_cifar10_batch(p) for p in paths]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    digest = hashlib.sha256(images.tobytes() + labels.tobytes()).hexdigest()
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), f"cifar10-{split}", digest)


def write_mnist_subset(directory, train_count=2000, test_count=1000, seed=0):
    """Write IDX train/test files from the 5000-digit MNIST sample bundled with mlxtend.

    The sample is class-sorted, so it is shuffled with ``seed`` first; the
    first ``train_count`` digits become the train split and the last
    ``test_count`` the test split.
    """
    from importlib import resources

    source = resources.files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"
    with resources.as_file(source) as p, gzip.open(p) as fh:
        table = np.loadtxt(fh, delimiter=",")
    pixels = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    order = np.random.default_rng(seed).permutation(len(labels))
    pixels, labels = pixels[order], labels[order]
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if train_count + test_count > len(labels):
        raise ValueError(f"only {len(labels)} digits available, asked for {train_count} + {test_count}")
    cut = len(labels) - test_count
    for split, sl in (("train", slice(0, train_count)), ("test", slice(cut, None))):
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(directory / img_name, pixels[sl])
        write_idx(directory / lbl_name, labels[sl])
    return directory
