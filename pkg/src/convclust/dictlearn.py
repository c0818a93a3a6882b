"""Patch-level and convolutional k-means dictionary learning.

Both algorithms keep a dictionary of k unit-norm filter columns and update
it with a damped accumulate-then-renormalize rule: every sample contributes
code * patch to its winning column, the sum is added onto the old column,
and columns are renormalized. The convolutional variant scores every patch
offset inside a larger window and accumulates the best-aligned patch, which
suppresses shifted-duplicate centroids.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data_io import (
    RNG_ALGORITHM,
    PatchBatch,
    WindowBatch,
    _as_images,
    _sample_crops,
)
from .errors import (
    InsufficientPatchesError,
    ShapeMismatchError,
)
from .preprocess import GCN_EPS, ZCA_EPS, WhiteningTransform, apply_zca, fit_zca, gcn

# Window scoring is chunked to bound the size of the materialized
# candidate-patch matrix; fixed so that accumulation order never varies.
_WINDOW_CHUNK = 512

_DUPLICATE_TOL = 1e-9


@dataclass
class Dictionary:
    """k filters of shape (c, s, s), unit L2 norm when flattened."""

    filters: np.ndarray                # (k, c, s, s) float32
    meta: dict = field(default_factory=dict)
    whitening: WhiteningTransform | None = None

    @property
    def k(self) -> int:
        return self.filters.shape[0]

    @property
    def c(self) -> int:
        return self.filters.shape[1]

    @property
    def s(self) -> int:
        return self.filters.shape[2]

    def matrix(self) -> np.ndarray:
        """Columns view (n, k) with n = c*s*s."""
        return self.filters.reshape(self.k, -1).T


@dataclass(frozen=True)
class Assignment:
    """Winning filter index, patch offset (windows only) and signed code."""

    index: int
    x: int = 0
    y: int = 0
    code: float = 0.0


def _flat_patches(patches) -> np.ndarray:
    if isinstance(patches, PatchBatch):
        patches = patches.patches
    arr = np.asarray(patches)
    return arr.reshape(len(arr), int(np.prod(arr.shape[1:])))


def _normalize_columns(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=0)
    safe = np.where(norms > 1e-12, norms, 1.0)
    return mat / safe


def init_dictionary(patches, k: int, seed) -> Dictionary:
    """Initialize from k distinct random patches, each L2-normalized."""
    flat = _flat_patches(patches).astype(np.float32)
    m, n = flat.shape
    if m < k:
        raise InsufficientPatchesError(f"{m} patches < k={k}")
    if isinstance(patches, PatchBatch):
        c, s = patches.patches.shape[1], patches.patches.shape[2]
    else:
        arr = np.asarray(patches)
        c, s = (arr.shape[1], arr.shape[2]) if arr.ndim == 4 else (1, int(np.sqrt(n)))
    rng = np.random.default_rng(seed)
    order = rng.permutation(m)
    cols = []
    for i in order:
        cand = flat[i]
        norm = np.linalg.norm(cand)
        if norm < 1e-12:
            continue
        cand = cand / norm
        if any(np.linalg.norm(cand - c0) < _DUPLICATE_TOL for c0 in cols):
            continue
        cols.append(cand)
        if len(cols) == k:
            break
    if len(cols) < k:
        raise InsufficientPatchesError(
            f"only {len(cols)} distinct non-zero patches available, need {k}"
        )
    filters = np.stack(cols).reshape(k, c, s, s)
    return Dictionary(filters=filters, meta={"init_seed_rng": RNG_ALGORITHM})


def assign_patch(dictionary: Dictionary, patch: np.ndarray) -> Assignment:
    """Eq.-1 assignment: argmax_l |D^(l)^T w|, signed code, lowest index on ties."""
    flat = np.asarray(patch, dtype=np.float64).ravel()
    mat = dictionary.matrix().astype(np.float64)
    if flat.shape[0] != mat.shape[0]:
        raise ShapeMismatchError(
            f"patch length {flat.shape[0]} != filter length {mat.shape[0]}"
        )
    scores = mat.T @ flat
    j = int(np.argmax(np.abs(scores)))
    return Assignment(index=j, x=0, y=0, code=float(scores[j]))


def assign_window(dictionary: Dictionary, window: np.ndarray) -> Assignment:
    """Eq.-2 assignment over all filters x patch offsets inside the window.

    Ties break lexicographically on (index, x, y); x, y are the row/column
    of the winning patch's top-left corner.
    """
    win = np.asarray(window, dtype=np.float64)
    c, s = dictionary.c, dictionary.s
    if win.ndim != 3 or win.shape[0] != c or min(win.shape[1:]) < s:
        raise ShapeMismatchError(
            f"window {win.shape} incompatible with filters "
            f"({c}, {s}, {s})"
        )
    view = sliding_window_view(win, (s, s), axis=(1, 2))  # (c, X, Y, s, s)
    scores = np.einsum(
        "cxyij,kcij->kxy", view, dictionary.filters.astype(np.float64)
    )
    flat_idx = int(np.argmax(np.abs(scores)))
    k_, x_, y_ = np.unravel_index(flat_idx, scores.shape)
    return Assignment(
        index=int(k_), x=int(x_), y=int(y_), code=float(scores[k_, x_, y_])
    )


def _accumulate(mat: np.ndarray, winners: np.ndarray, codes: np.ndarray,
                flat: np.ndarray) -> np.ndarray:
    """Sum code*patch into winning columns, in patch-index order per column."""
    acc = np.zeros_like(mat, dtype=np.float64)
    if len(winners) == 0:
        return acc
    order = np.argsort(winners, kind="stable")
    sorted_w = winners[order]
    bounds = np.flatnonzero(np.diff(sorted_w)) + 1
    for seg in np.split(order, bounds):
        j = winners[seg[0]]
        acc[:, j] = codes[seg].astype(np.float64) @ flat[seg].astype(np.float64)
    return acc


def _finish_epoch(dictionary: Dictionary, acc: np.ndarray,
                  winners: np.ndarray) -> tuple[Dictionary, np.ndarray]:
    counts = np.bincount(winners, minlength=dictionary.k).astype(np.int64)
    mat = dictionary.matrix().astype(np.float64)
    new = _normalize_columns(mat + acc).astype(np.float32)
    # renormalizing an untouched unit column is the identity; keep its bits
    used = (counts > 0) & np.any(acc != 0.0, axis=0)
    out = dictionary.matrix().copy()
    out[:, used] = new[:, used]
    filters = out.T.reshape(dictionary.filters.shape)
    return replace(dictionary, filters=filters), counts


def kmeans_epoch(dictionary: Dictionary, patches) -> tuple[Dictionary, np.ndarray]:
    """One damped update pass over a patch batch; returns (dict, usage counts)."""
    flat = _flat_patches(patches).astype(np.float32)
    mat = dictionary.matrix()
    if len(flat) == 0:
        return dictionary, np.zeros(dictionary.k, dtype=np.int64)
    if flat.shape[1] != mat.shape[0]:
        raise ShapeMismatchError(
            f"patch length {flat.shape[1]} != filter length {mat.shape[0]}"
        )
    scores = flat @ mat                      # (m, k)
    winners = np.argmax(np.abs(scores), axis=1)
    codes = scores[np.arange(len(flat)), winners]
    acc = _accumulate(mat, winners, codes, flat)
    return _finish_epoch(dictionary, acc, winners)


def _score_windows(dictionary: Dictionary, windows: np.ndarray,
                   transform: WhiteningTransform | None):
    """Chunked scoring of every patch offset in every window.

    Returns winners, codes and the (whitened) winning patches, all ordered
    by window index so accumulation is order-stable.
    """
    m, c, wh, ww = windows.shape
    s = dictionary.s
    nx, ny = wh - s + 1, ww - s + 1
    n = c * s * s
    mat = dictionary.matrix()
    winners = np.empty(m, dtype=np.int64)
    xs = np.empty(m, dtype=np.int64)
    ys = np.empty(m, dtype=np.int64)
    codes = np.empty(m, dtype=np.float32)
    win_patches = np.empty((m, n), dtype=np.float32)
    for lo in range(0, m, _WINDOW_CHUNK):
        hi = min(lo + _WINDOW_CHUNK, m)
        chunk = windows[lo:hi]
        view = sliding_window_view(chunk, (s, s), axis=(2, 3))  # (B,c,X,Y,s,s)
        cands = np.ascontiguousarray(
            view.transpose(0, 2, 3, 1, 4, 5), dtype=np.float32
        ).reshape(hi - lo, nx * ny, n)
        if transform is not None:
            flat = (cands.reshape(-1, n) - transform.mean) @ transform.matrix
            cands = flat.reshape(hi - lo, nx * ny, n)
        scores = cands @ mat                                    # (B, XY, k)
        # j-major flattening makes argmax ties lexicographic on (j, x, y)
        ordered = np.abs(scores).transpose(0, 2, 1).reshape(hi - lo, -1)
        best = np.argmax(ordered, axis=1)
        j = best // (nx * ny)
        pos = best % (nx * ny)
        rows = np.arange(hi - lo)
        winners[lo:hi] = j
        xs[lo:hi] = pos // ny
        ys[lo:hi] = pos % ny
        codes[lo:hi] = scores[rows, pos, j]
        win_patches[lo:hi] = cands[rows, pos]
    return winners, xs, ys, codes, win_patches


def conv_kmeans_epoch(
    dictionary: Dictionary,
    windows,
    transform: WhiteningTransform | None = None,
) -> tuple[Dictionary, np.ndarray]:
    """One convolutional update pass: accumulate best-offset patches.

    When a whitening transform is given, every candidate patch is whitened
    before scoring and the whitened winner is accumulated.
    """
    if isinstance(windows, WindowBatch):
        windows = windows.windows
    arr = np.asarray(windows, dtype=np.float32)
    if len(arr) == 0:
        return dictionary, np.zeros(dictionary.k, dtype=np.int64)
    if arr.ndim != 4 or arr.shape[1] != dictionary.c or min(arr.shape[2:]) < dictionary.s:
        raise ShapeMismatchError(
            f"windows {arr.shape} incompatible with filters "
            f"({dictionary.c}, {dictionary.s}, {dictionary.s})"
        )
    winners, _, _, codes, win_patches = _score_windows(dictionary, arr, transform)
    acc = _accumulate(dictionary.matrix(), winners, codes, win_patches)
    return _finish_epoch(dictionary, acc, winners)


def reinit_empty_clusters(
    dictionary: Dictionary, usage_counts: np.ndarray, patches, seed
) -> Dictionary:
    """Replace columns with zero assignments by fresh normalized patches."""
    dead = np.flatnonzero(np.asarray(usage_counts) == 0)
    if len(dead) == 0:
        return dictionary
    flat = _flat_patches(patches).astype(np.float32)
    rng = np.random.default_rng(seed)
    mat = dictionary.matrix().copy()
    for j in dead:
        for _ in range(100):
            cand = flat[rng.integers(len(flat))]
            norm = np.linalg.norm(cand)
            if norm < 1e-12:
                continue
            cand = cand / norm
            diffs = np.linalg.norm(mat - cand[:, None], axis=0)
            if diffs.min() >= _DUPLICATE_TOL:
                break
        mat[:, j] = cand
    filters = mat.T.reshape(dictionary.filters.shape).astype(np.float32)
    return replace(dictionary, filters=filters)


def _train_meta(algorithm, k, c, s, epochs, samples, seed, zca_eps, gcn_eps):
    return {
        "algorithm": algorithm,
        "k": int(k),
        "c": int(c),
        "s": int(s),
        "epochs": int(epochs),
        "samples_per_epoch": int(samples),
        "seed": int(seed),
        "zca_eps": float(zca_eps),
        "gcn_eps": float(gcn_eps),
        "rng": RNG_ALGORITHM,
    }


def train_kmeans(
    images,
    k: int,
    c: int,
    s: int,
    epochs: int = 30,
    patches_per_epoch: int = 400_000,
    seed: int = 0,
    zca_eps: float = ZCA_EPS,
    gcn_eps: float = GCN_EPS,
) -> Dictionary:
    """Patch-level k-means: sample once, GCN, whiten, iterate damped updates."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    ss = np.random.SeedSequence(seed)
    sample_seed, init_seed, reinit_seed = ss.spawn(3)
    arr = _as_images(images)
    crops, _, _, _ = _sample_crops(arr, patches_per_epoch, s,
                                   np.random.default_rng(sample_seed))
    if arr.shape[1] != c:
        raise ShapeMismatchError(f"images have {arr.shape[1]} channels, expected {c}")
    normed = gcn(crops, eps=gcn_eps)
    transform = fit_zca(normed, eps=zca_eps)
    white = apply_zca(transform, normed).reshape(len(normed), -1)
    dictionary = init_dictionary(
        white.reshape(-1, c, s, s), k, init_seed
    )
    reinit_rng = np.random.default_rng(reinit_seed)
    for _ in range(epochs):
        dictionary, counts = kmeans_epoch(dictionary, white)
        dictionary = reinit_empty_clusters(dictionary, counts, white, reinit_rng)
    dictionary.meta.update(
        _train_meta("kmeans", k, c, s, epochs, patches_per_epoch, seed,
                    zca_eps, gcn_eps)
    )
    dictionary.whitening = transform
    return dictionary


def train_conv_kmeans(
    images,
    k: int,
    c: int,
    s: int,
    epochs: int = 30,
    windows_per_epoch: int = 400_000,
    seed: int = 0,
    zca_eps: float = ZCA_EPS,
    gcn_eps: float = GCN_EPS,
    window_scale: int = 2,
) -> Dictionary:
    """Convolutional k-means: windows are 2s wide; whitening is fitted on
    center crops and applied to every candidate patch during scoring.

    window_scale=1 degenerates to the patch algorithm (tests only).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    side = window_scale * s
    ss = np.random.SeedSequence(seed)
    sample_seed, init_seed, reinit_seed = ss.spawn(3)
    arr = _as_images(images)
    if arr.shape[1] != c:
        raise ShapeMismatchError(f"images have {arr.shape[1]} channels, expected {c}")
    crops, _, _, _ = _sample_crops(arr, windows_per_epoch, side,
                                   np.random.default_rng(sample_seed))
    windows = gcn(crops, eps=gcn_eps)
    c0 = (side - s) // 2
    centers = windows[:, :, c0:c0 + s, c0:c0 + s]
    transform = fit_zca(centers, eps=zca_eps)
    white_centers = apply_zca(transform, centers).reshape(len(windows), -1)
    dictionary = init_dictionary(
        white_centers.reshape(-1, c, s, s), k, init_seed
    )
    reinit_rng = np.random.default_rng(reinit_seed)
    for _ in range(epochs):
        dictionary, counts = conv_kmeans_epoch(dictionary, windows, transform)
        dictionary = reinit_empty_clusters(
            dictionary, counts, white_centers, reinit_rng
        )
    dictionary.meta.update(
        _train_meta("conv-kmeans", k, c, s, epochs, windows_per_epoch, seed,
                    zca_eps, gcn_eps)
    )
    dictionary.meta["window_scale"] = int(window_scale)
    dictionary.whitening = transform
    return dictionary


def redundancy_matrix(dictionary: Dictionary) -> np.ndarray:
    """Pairwise max |cross-correlation| over all 2D shifts, norm-scaled.

    Entry (i, j) close to 1 means filter j is (a shifted copy of) filter i;
    the diagonal is exactly 1.
    """
    k, c, s, _ = dictionary.filters.shape
    size = 2 * s - 1
    padded = np.zeros((k, c, size, size))
    padded[:, :, :s, :s] = dictionary.filters.astype(np.float64)
    spec = np.fft.fft2(padded)
    cross = np.einsum("icxy,jcxy->ijxy", spec, spec.conj())
    corr = np.fft.ifft2(cross).real
    peak = np.abs(corr).max(axis=(2, 3))
    norms = np.linalg.norm(dictionary.filters.reshape(k, -1), axis=1)
    denom = np.outer(norms, norms)
    out = np.where(denom > 1e-24, peak / np.where(denom > 1e-24, denom, 1.0), 0.0)
    np.fill_diagonal(out, 1.0)
    return out
