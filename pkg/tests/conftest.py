"""Shared fixtures: natural-image patches and dataset file locations."""

import os
from pathlib import Path

import numpy as np
import pytest

_LUMA = np.array([0.299, 0.587, 0.114])


def _natural_gray_images():
    from sklearn.datasets import load_sample_images

    return [im.astype(np.float64) @ _LUMA / 255.0
            for im in load_sample_images().images]


def _box_down(im, f):
    if f == 1:
        return im
    h, w = (im.shape[0] // f) * f, (im.shape[1] // f) * f
    return im[:h, :w].reshape(h // f, f, w // f, f).mean(axis=(1, 3))


def natural_gray_patches(count, s, seed, scales=(1, 2, 4)):
    """Grayscale patches of real photographs, drawn across scales and
    right-angle rotations so the ensemble is roughly stationary."""
    rng = np.random.default_rng(seed)
    pool = [_box_down(im, f) for im in _natural_gray_images() for f in scales]
    out = np.empty((count, 1, s, s), dtype=np.float32)
    for i in range(count):
        im = pool[rng.integers(len(pool))]
        t = rng.integers(0, im.shape[0] - s + 1)
        l = rng.integers(0, im.shape[1] - s + 1)
        out[i, 0] = np.rot90(im[t:t + s, l:l + s], rng.integers(4))
    return out


@pytest.fixture(scope="session")
def natural_patches_6x6():
    return natural_gray_patches(10_000, 6, seed=7)


def data_root() -> Path:
    return Path(os.environ.get("CONVCLUST_DATA", "data"))


def mnist_paths():
    root = data_root()
    return {
        "train_images": root / "train-images-idx3-ubyte",
        "train_labels": root / "train-labels-idx1-ubyte",
        "test_images": root / "t10k-images-idx3-ubyte",
        "test_labels": root / "t10k-labels-idx1-ubyte",
    }


def mnist_available() -> bool:
    return all(p.exists() for p in mnist_paths().values())


def stl10_paths():
    root = data_root()
    return {
        "unlabeled": root / "stl10_binary" / "unlabeled_X.bin",
        "train_images": root / "stl10_binary" / "train_X.bin",
        "train_labels": root / "stl10_binary" / "train_y.bin",
        "test_images": root / "stl10_binary" / "test_X.bin",
        "test_labels": root / "stl10_binary" / "test_y.bin",
    }


def stl10_available() -> bool:
    return all(p.exists() for p in stl10_paths().values())
