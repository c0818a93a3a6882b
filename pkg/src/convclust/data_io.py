"""Bit-exact MNIST/STL-10 loaders and seeded patch/window samplers."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    CountMismatchError,
    InsufficientClassSamplesError,
    LabelOutOfRangeError,
    MalformedHeaderError,
    NotDivisibleError,
    PatchTooLargeError,
    TruncatedError,
    WindowTooLargeError,
)

MNIST_IMAGE_MAGIC = 2051
MNIST_LABEL_MAGIC = 2049
STL_SIDE = 96
STL_IMAGE_BYTES = 3 * STL_SIDE * STL_SIDE

# All sampling goes through numpy's default PCG64 generator; the tag is
# recorded in artifact metadata so runs can be reproduced elsewhere.
RNG_ALGORITHM = "numpy-pcg64"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LabeledSet:
    """Image batch (N, c, h, w) in [0, 1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise LabelOutOfRangeError(
                f"labels must lie in [0, {self.num_classes})"
            )

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class UnlabeledSet:
    """Image batch (N, c, h, w) without labels."""

    images: np.ndarray

    def __post_init__(self):
        if len(self.images) < 1:
            raise ValueError("an unlabeled set needs at least one image")

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class PatchBatch:
    """Random crops (m, c, s, s) plus the source location of every crop."""

    patches: np.ndarray
    image_idx: np.ndarray
    tops: np.ndarray
    lefts: np.ndarray

    def __len__(self) -> int:
        return len(self.patches)


@dataclass(frozen=True)
class WindowBatch:
    """Random crops (m, c, 2s, 2s) used by convolutional k-means."""

    windows: np.ndarray
    image_idx: np.ndarray
    tops: np.ndarray
    lefts: np.ndarray

    def __len__(self) -> int:
        return len(self.windows)


def load_mnist(images_path, labels_path) -> LabeledSet:
    """Parse an IDX image/label pair into a LabeledSet scaled by 1/255."""
    img_buf = Path(images_path).read_bytes()
    if len(img_buf) < 16:
        raise TruncatedError(f"{images_path}: header needs 16 bytes")
    magic, n, rows, cols = struct.unpack_from(">IIII", img_buf, 0)
    if magic != MNIST_IMAGE_MAGIC:
        raise MalformedHeaderError(
            f"{images_path}: magic {magic} != {MNIST_IMAGE_MAGIC}"
        )
    need = 16 + n * rows * cols
    if len(img_buf) < need:
        raise TruncatedError(f"{images_path}: {len(img_buf)} bytes < {need}")

    lbl_buf = Path(labels_path).read_bytes()
    if len(lbl_buf) < 8:
        raise TruncatedError(f"{labels_path}: header needs 8 bytes")
    lmagic, ln = struct.unpack_from(">II", lbl_buf, 0)
    if lmagic != MNIST_LABEL_MAGIC:
        raise MalformedHeaderError(
            f"{labels_path}: magic {lmagic} != {MNIST_LABEL_MAGIC}"
        )
    if ln != n:
        raise CountMismatchError(f"{n} images vs {ln} labels")
    if len(lbl_buf) < 8 + ln:
        raise TruncatedError(f"{labels_path}: {len(lbl_buf)} bytes < {8 + ln}")

    pixels = np.frombuffer(img_buf, np.uint8, count=n * rows * cols, offset=16)
    images = pixels.reshape(n, 1, rows, cols).astype(np.float32) / 255.0
    labels = np.frombuffer(lbl_buf, np.uint8, count=ln, offset=8).astype(np.int64)
    return LabeledSet(_frozen(images), _frozen(labels), num_classes=10)


def load_stl10(data_path, labels_path=None):
    """Parse STL-10 binary images (and optional labels).

    The file stores 3 channel planes per image, each plane column-major;
    planes are transposed on load so returned tensors are row-major
    (3, 96, 96). Labels 1..10 are remapped to 0..9.
    """
    buf = Path(data_path).read_bytes()
    if len(buf) == 0 or len(buf) % STL_IMAGE_BYTES != 0:
        raise TruncatedError(
            f"{data_path}: {len(buf)} bytes is not a multiple of {STL_IMAGE_BYTES}"
        )
    n = len(buf) // STL_IMAGE_BYTES
    raw = np.frombuffer(buf, np.uint8).reshape(n, 3, STL_SIDE, STL_SIDE)
    images = raw.swapaxes(2, 3).astype(np.float32) / 255.0

    if labels_path is None:
        return UnlabeledSet(_frozen(images))

    lbl = np.frombuffer(Path(labels_path).read_bytes(), np.uint8)
    if len(lbl) != n:
        raise CountMismatchError(f"{n} images vs {len(lbl)} labels")
    if len(lbl) and (lbl.min() < 1 or lbl.max() > 10):
        raise LabelOutOfRangeError("STL-10 labels must lie in 1..10")
    labels = lbl.astype(np.int64) - 1
    return LabeledSet(_frozen(images), _frozen(labels), num_classes=10)


def sample_labeled_subset(data: LabeledSet, n: int, seed) -> LabeledSet:
    """Draw n samples with exactly n/C per class, shuffled deterministically."""
    c = data.num_classes
    if n % c != 0:
        raise NotDivisibleError(f"n={n} is not divisible by {c} classes")
    per_class = n // c
    rng = np.random.default_rng(seed)
    picks = []
    for cls in range(c):
        idx = np.flatnonzero(data.labels == cls)
        if len(idx) < per_class:
            raise InsufficientClassSamplesError(
                f"class {cls} has {len(idx)} samples, need {per_class}"
            )
        picks.append(rng.choice(idx, size=per_class, replace=False))
    order = rng.permutation(np.concatenate(picks))
    return LabeledSet(
        _frozen(data.images[order]), _frozen(data.labels[order]), num_classes=c
    )


def _as_images(images) -> np.ndarray:
    if isinstance(images, (LabeledSet, UnlabeledSet)):
        return images.images
    return np.asarray(images)


def _sample_crops(images: np.ndarray, count: int, side: int, rng):
    """Uniform crops of a given side; shared by patch and window samplers."""
    n, _, h, w = images.shape
    idx = rng.integers(0, n, size=count)
    tops = rng.integers(0, h - side + 1, size=count)
    lefts = rng.integers(0, w - side + 1, size=count)
    if count == 0:
        crops = np.empty((0, images.shape[1], side, side), dtype=np.float32)
        return crops, idx, tops, lefts
    view = sliding_window_view(images, (side, side), axis=(2, 3))
    crops = np.ascontiguousarray(view[idx, :, tops, lefts], dtype=np.float32)
    return crops, idx, tops, lefts


def sample_patches(images, count: int, c: int, s: int, seed) -> PatchBatch:
    """Sample `count` patches of shape (c, s, s) at uniform valid positions."""
    arr = _as_images(images)
    if arr.ndim != 4 or arr.shape[1] != c:
        raise PatchTooLargeError(
            f"expected images (N, {c}, h, w), got {arr.shape}"
        )
    if s > min(arr.shape[2], arr.shape[3]):
        raise PatchTooLargeError(
            f"patch side {s} exceeds image extent {arr.shape[2:]} "
        )
    rng = np.random.default_rng(seed)
    crops, idx, tops, lefts = _sample_crops(arr, count, s, rng)
    return PatchBatch(crops, idx, tops, lefts)


def sample_windows(images, count: int, c: int, s: int, seed) -> WindowBatch:
    """Sample `count` windows of shape (c, 2s, 2s) at uniform valid positions."""
    arr = _as_images(images)
    side = 2 * s
    if arr.ndim != 4 or arr.shape[1] != c:
        raise WindowTooLargeError(
            f"expected images (N, {c}, h, w), got {arr.shape}"
        )
    if side > min(arr.shape[2], arr.shape[3]):
        raise WindowTooLargeError(
            f"window side {side} exceeds image extent {arr.shape[2:]}"
        )
    rng = np.random.default_rng(seed)
    crops, idx, tops, lefts = _sample_crops(arr, count, side, rng)
    return WindowBatch(crops, idx, tops, lefts)
