"""MNIST IDX parsing, 0-vs-1 filtering, padding and deterministic splits.

IDX layout (all integers big-endian)::

    [0x00 0x00] [type: 0x08 = ubyte] [ndim] [dim_0 .. dim_{ndim-1} as uint32] [payload]

so the leading uint32 is 2051 for image files (3 dims) and 2049 for label
files (1 dim). Gzip-compressed files are detected by their 0x1f 0x8b magic.
"""

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
DATA_DIR_ENV = "QPATE_DATA_DIR"
PAD = 2
SIZE = 32

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


@dataclass
class Dataset:
    """Images ``(N, 1, 32, 32)`` in [0, 1], labels ``(N,)`` and original indices."""

    images: np.ndarray
    labels: np.ndarray
    source_ids: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.source_ids[idx])


def _read_bytes(source):
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif hasattr(source, "read"):
        raw = source.read()
    else:
        raw = Path(source).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(source):
    """Parse an IDX byte stream (path, bytes or file object) into a uint8 array."""
    raw = _read_bytes(source)
    if len(raw) < 4:
        raise FormatError(f"IDX header truncated: {len(raw)} bytes, need at least 4")
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"bad IDX magic at offset 0: {raw[:2].hex()}")
    if raw[2] != 0x08:
        raise FormatError(f"unsupported IDX element type 0x{raw[2]:02x} at offset 2")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"IDX header truncated: expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(raw) - header
    if actual != expected:
        raise FormatError(f"IDX payload size mismatch: expected {expected} bytes, got {actual}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def serialize_idx(array):
    """Inverse of :func:`parse_idx` (uncompressed)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise UsageError("only unsigned-byte IDX files are supported")
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.tobytes()


def load_idx_pair(image_source, label_source):
    images = parse_idx(image_source)
    labels = parse_idx(label_source)
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError(f"expected 3-D images and 1-D labels, got {images.shape} and {labels.shape}")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return images, labels


def filter_binary(images, labels):
    """Keep samples labelled 0 or 1, preserving order. Returns ``(images, labels, index)``."""
    labels = np.asarray(labels)
    keep = np.flatnonzero((labels == 0) | (labels == 1))
    return images[keep], labels[keep].astype(np.int64), keep


def pad_normalize(images):
    """Scale bytes to [0, 1] and centre 28x28 images in a zero 32x32 frame.

    Accepts a single image ``(28, 28)`` or a stack ``(N, 28, 28)``.
    """
    images = np.asarray(images)
    single = images.ndim == 2
    if single:
        images = images[None]
    n, h, w = images.shape
    out = np.zeros((n, h + 2 * PAD, w + 2 * PAD))
    out[:, PAD:PAD + h, PAD:PAD + w] = images / 255.0
    return out[0] if single else out


def resolve_data_dir(data_dir=None):
    """Explicit path, else ``$QPATE_DATA_DIR``; raises with both names if unresolved."""
    candidate = data_dir or os.environ.get(DATA_DIR_ENV)
    if not candidate:
        raise UsageError(
            f"no MNIST directory given: pass --data-dir or set {DATA_DIR_ENV}")
    path = Path(candidate)
    if not path.is_dir():
        raise UsageError(f"MNIST directory {path} does not exist (set --data-dir or {DATA_DIR_ENV})")
    return path


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise UsageError(f"missing {stem}[.gz] in {directory} (set --data-dir or {DATA_DIR_ENV})")


def load_mnist_binary(data_dir=None, split="train"):
    """Load the 0/1 subset of an MNIST split as a padded :class:`Dataset`."""
    directory = resolve_data_dir(data_dir)
    names = TRAIN_FILES if split == "train" else TEST_FILES
    images, labels = load_idx_pair(_find(directory, names[0]), _find(directory, names[1]))
    images, labels, keep = filter_binary(images, labels)
    return Dataset(pad_normalize(images)[:, None], labels, keep)


@dataclass(frozen=True)
class SplitSpec:
    teacher_pool: int = 1000
    student_pool: int = 1000
    validation: int = 100
    test: int = 100
    seed: int = 0

    @property
    def total(self):
        return self.teacher_pool + self.student_pool + self.validation + self.test

    def scaled(self, factor):
        return SplitSpec(int(self.teacher_pool * factor), int(self.student_pool * factor),
                         self.validation, self.test, self.seed)


def make_splits(num_samples, spec):
    """Seeded shuffle, then consecutive teacher/student/validation/test slices."""
    if num_samples < spec.total:
        raise UsageError(f"need {spec.total} samples for the split, have {num_samples}")
    order = np.random.default_rng(spec.seed).permutation(num_samples)
    bounds = np.cumsum([0, spec.teacher_pool, spec.student_pool, spec.validation, spec.test])
    return tuple(order[a:b] for a, b in zip(bounds[:-1], bounds[1:]))


def _draw_ring(rng):
    yy, xx = np.mgrid[0:28, 0:28]
    cy, cx = 14 + rng.uniform(-2, 2), 14 + rng.uniform(-2, 2)
    ry, rx = rng.uniform(6, 9), rng.uniform(4, 7)
    thickness = rng.uniform(1.5, 2.5)
    dist = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return np.clip(1.0 - np.abs(dist - 1.0) * min(ry, rx) / thickness, 0, 1)


def _draw_bar(rng):
    yy, xx = np.mgrid[0:28, 0:28]
    cx = 14 + rng.uniform(-3, 3)
    slant = rng.uniform(-0.25, 0.25)
    half = rng.uniform(1.0, 2.0)
    top, bottom = rng.uniform(3, 7), rng.uniform(21, 25)
    centre = cx + slant * (yy - 14)
    img = np.clip(1.0 - (np.abs(xx - centre) - half), 0, 1)
    img[(yy < top) | (yy > bottom)] = 0
    return img


def synthetic_dataset(n, seed=0):
    """Offline stand-in for MNIST 0/1: noisy rings (label 0) and slanted bars (label 1)."""
    if n < 1:
        raise UsageError("n must be positive")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    raw = np.empty((n, 28, 28), dtype=np.uint8)
    for i, label in enumerate(labels):
        img = _draw_bar(rng) if label else _draw_ring(rng)
        img = img + rng.normal(0, 0.05, img.shape)
        raw[i] = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return Dataset(pad_normalize(raw)[:, None], labels.astype(np.int64), np.arange(n))
