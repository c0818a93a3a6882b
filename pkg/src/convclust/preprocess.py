"""Global contrast normalization and ZCA whitening.

GCN runs per sample (scalar mean/std over all channels); ZCA is fitted on
GCN-normalized patches and applied only while learning dictionaries, never
at encoding time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_io import PatchBatch
from .errors import DegenerateCovarianceError, ShapeMismatchError

GCN_EPS = 1e-2
ZCA_EPS = 0.1


def gcn(batch: np.ndarray, eps: float = GCN_EPS) -> np.ndarray:
    """Per-sample contrast normalization: zero mean, unit-ish variance.

    Divides by sqrt(population variance + eps); eps guards constant samples.
    """
    x = np.asarray(batch, dtype=np.float32)
    flat = x.reshape(len(x), -1)
    mu = flat.mean(axis=1, keepdims=True)
    var = flat.var(axis=1, keepdims=True)
    out = (flat - mu) / np.sqrt(var + eps)
    return out.reshape(x.shape)


@dataclass
class WhiteningTransform:
    """Mean vector and symmetric ZCA matrix over flattened patches."""

    mean: np.ndarray       # (n,)
    matrix: np.ndarray     # (n, n), symmetric
    eps: float             # regularizer relative to the mean eigenvalue
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.mean)


def _flatten_patches(patches) -> np.ndarray:
    if isinstance(patches, PatchBatch):
        patches = patches.patches
    arr = np.asarray(patches)
    return arr.reshape(len(arr), -1)


def fit_zca(patches, eps: float = ZCA_EPS) -> WhiteningTransform:
    """Fit E diag((lam + eps*mean(lam))^-1/2) E^T on GCN-normalized patches.

    Covariance uses the population (1/m) normalizer.
    """
    x = _flatten_patches(patches).astype(np.float64)
    m, n = x.shape
    if m < n:
        raise DegenerateCovarianceError(
            f"{m} patches cannot determine an {n}x{n} covariance"
        )
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / m
    try:
        lam, e = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError(str(exc)) from exc
    lam = np.clip(lam, 0.0, None)
    eps_abs = eps * lam.mean()
    if eps_abs <= 0.0:
        raise DegenerateCovarianceError("covariance has zero trace")
    matrix = (e * (1.0 / np.sqrt(lam + eps_abs))) @ e.T
    matrix = (matrix + matrix.T) / 2.0  # kill fp asymmetry
    return WhiteningTransform(
        mean=mean.astype(np.float32),
        matrix=matrix.astype(np.float32),
        eps=float(eps),
        meta={"eps_abs": float(eps_abs), "fit_patches": int(m)},
    )


def apply_zca(transform: WhiteningTransform, patches):
    """Whiten patches: matrix @ (patch - mean), original shape preserved."""
    if isinstance(patches, PatchBatch):
        arr = patches.patches
    else:
        arr = np.asarray(patches)
    single = arr.ndim == 3 or (arr.ndim == 1)
    flat = arr.reshape(1, -1) if single else arr.reshape(len(arr), -1)
    if flat.shape[1] != transform.dim:
        raise ShapeMismatchError(
            f"patch length {flat.shape[1]} != transform dim {transform.dim}"
        )
    out = (flat - transform.mean) @ transform.matrix
    out = out.astype(np.float32)
    return out.reshape(arr.shape)
