"""Synthetic image and feature generators used by experiments and tests.

These provide desk-scale substitutes for the photographic datasets: a
shifted-pattern corpus that exposes filter redundancy, a motif-pair
classification task where class identity lives in feature co-occurrence,
and a scattered-channel feature task where useful channel combinations
straddle the pre-defined group boundaries.
"""

from __future__ import annotations

import numpy as np

from .data_io import LabeledSet, _frozen


def shifted_pattern_images(
    n_images: int = 2000,
    image_size: int = 24,
    n_patterns: int = 8,
    pattern_size: int = 5,
    seed: int = 0,
    patterns_per_image: int = 2,
    noise: float = 0.03,
) -> np.ndarray:
    """Images containing fixed base patterns at uniformly random shifts.

    Patch-level k-means on this corpus learns shifted duplicates of the
    same pattern; convolutional k-means collapses them.
    """
    rng = np.random.default_rng(seed)
    pats = rng.normal(size=(n_patterns, pattern_size, pattern_size))
    pats /= np.linalg.norm(pats.reshape(n_patterns, -1), axis=1)[:, None, None]
    images = noise * rng.normal(size=(n_images, 1, image_size, image_size))
    span = image_size - pattern_size + 1
    for i in range(n_images):
        for _ in range(patterns_per_image):
            p = rng.integers(n_patterns)
            t = rng.integers(span)
            l = rng.integers(span)
            images[i, 0, t:t + pattern_size, l:l + pattern_size] += pats[p]
    return images.astype(np.float32)


def _default_pairs(n_motifs: int, n_classes: int) -> list[tuple[int, int]]:
    # Cycle through motif pairs so every motif appears in several classes:
    # marginal motif presence then carries little class information.
    pairs = []
    step = 1
    a = 0
    while len(pairs) < n_classes:
        b = (a + step) % n_motifs
        if a != b and (a, b) not in pairs:
            pairs.append((a, b))
        a = (a + 1) % n_motifs
        if a == 0:
            step += 1
    return pairs


def motif_pair_set(
    n_per_class: int,
    seed: int = 0,
    n_classes: int = 10,
    n_motifs: int = 5,
    image_size: int = 24,
    motif_size: int = 5,
    noise: float = 0.05,
    distractors: int = 2,
    placement_seed: int | None = None,
) -> LabeledSet:
    """Labeled images whose class is an adjacent motif pair.

    Each class places its two motifs side by side at a random position;
    distractor motifs appear alone elsewhere, so detecting a single motif
    is not enough to classify. The motif shapes depend only on `seed`;
    `placement_seed` varies positions, giving disjoint train/test splits
    over the same concepts.
    """
    motif_rng = np.random.default_rng(seed)
    motifs = motif_rng.normal(size=(n_motifs, motif_size, motif_size))
    motifs /= np.linalg.norm(motifs.reshape(n_motifs, -1), axis=1)[:, None, None]
    pairs = _default_pairs(n_motifs, n_classes)

    rng = np.random.default_rng(
        seed if placement_seed is None else placement_seed
    )
    n = n_per_class * n_classes
    images = noise * rng.normal(size=(n, 1, image_size, image_size))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    span_t = image_size - motif_size + 1
    span_l = image_size - 2 * motif_size + 1
    span = image_size - motif_size + 1
    for i in range(n):
        a, b = pairs[labels[i]]
        t = rng.integers(span_t)
        l = rng.integers(span_l)
        images[i, 0, t:t + motif_size, l:l + motif_size] += motifs[a]
        images[i, 0, t:t + motif_size, l + motif_size:l + 2 * motif_size] += motifs[b]
        for _ in range(distractors):
            d = rng.integers(n_motifs)
            dt = rng.integers(span)
            dl = rng.integers(span)
            images[i, 0, dt:dt + motif_size, dl:dl + motif_size] += 0.8 * motifs[d]
    order = rng.permutation(n)
    return LabeledSet(
        _frozen(images[order].astype(np.float32)),
        _frozen(labels[order]),
        num_classes=n_classes,
    )


def scattered_channel_features(
    n_samples: int,
    n_maps: int = 16,
    group_size: int = 4,
    n_classes: int = 4,
    map_size: int = 8,
    seed: int = 0,
    noise: float = 0.1,
):
    """Feature maps where class = which channel pair fires at one location.

    The informative pairs are chosen to straddle consecutive groups, so a
    grouped second layer only sees them together after channel mixing.
    Returns (features (N, n_maps, h, w) float32, labels (N,) int64).
    """
    rng = np.random.default_rng(seed)
    n_groups = n_maps // group_size
    pairs = []
    for c in range(n_classes):
        ga = c % n_groups
        gb = (c + 1 + c // n_groups) % n_groups
        if gb == ga:
            gb = (ga + 1) % n_groups
        pairs.append((ga * group_size + rng.integers(group_size),
                      gb * group_size + rng.integers(group_size)))

    feats = noise * rng.random((n_samples, n_maps, map_size, map_size))
    labels = rng.integers(0, n_classes, size=n_samples)
    for i in range(n_samples):
        a, b = pairs[labels[i]]
        t = rng.integers(map_size - 1)
        l = rng.integers(map_size - 1)
        feats[i, a, t:t + 2, l:l + 2] += 1.0
        feats[i, b, t:t + 2, l:l + 2] += 1.0
        # decoy: a lone activation on a random channel elsewhere
        d = rng.integers(n_maps)
        dt = rng.integers(map_size - 1)
        dl = rng.integers(map_size - 1)
        feats[i, d, dt:dt + 2, dl:dl + 2] += 1.0
    return feats.astype(np.float32), labels.astype(np.int64)
