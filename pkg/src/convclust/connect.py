"""Supervised inter-layer connection learning and per-group dictionaries.

The connection matrix is a dense 1x1 channel mixing (with bias) trained
with a small labeled set through a throwaway stack: mix -> grouped conv ->
pool -> ReLU -> classifier. Afterwards only the matrix and bias are kept;
the grouped filters are re-learned per group with convolutional k-means on
the mixed feature maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_io import RNG_ALGORITHM
from .dictlearn import Dictionary, train_conv_kmeans
from .errors import NotDivisibleError, SchemeMismatchError
from .netcore import (
    ChannelMixLayer,
    DropoutLayer,
    FlattenLayer,
    GroupConvLayer,
    LinearLayer,
    MaxPoolLayer,
    Network,
    ReLULayer,
    TrainConfig,
    channel_mix,
    fit_network,
    _uniform_init,
)
from .preprocess import GCN_EPS, ZCA_EPS


@dataclass(frozen=True)
class GroupScheme:
    """Partition of n_maps channels into consecutive groups of equal size."""

    n_maps: int
    group_size: int

    def __post_init__(self):
        if self.n_maps % self.group_size != 0:
            raise NotDivisibleError(
                f"{self.group_size} does not divide {self.n_maps} maps"
            )

    @property
    def n_groups(self) -> int:
        return self.n_maps // self.group_size

    def slices(self) -> list[tuple[int, int]]:
        g = self.group_size
        return [(i * g, (i + 1) * g) for i in range(self.n_groups)]


def build_group_scheme(n_maps: int, g: int) -> GroupScheme:
    return GroupScheme(n_maps=n_maps, group_size=g)


@dataclass
class ConnectionMatrix:
    """Dense channel-mixing weights plus bias, trained with supervision."""

    matrix: np.ndarray          # (m, n) float32
    bias: np.ndarray            # (m,) float32
    meta: dict = field(default_factory=dict)

    @property
    def n_in(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_out(self) -> int:
        return self.matrix.shape[0]


def apply_connections(connections: ConnectionMatrix, maps) -> np.ndarray:
    return channel_mix(maps, connections.matrix, connections.bias)


def build_connection_network(n_in, n_out, scheme, kg, s2, pool_size, hidden,
                             classes, dropout, feat_hw, seed,
                             mix_trainable=True, init_matrix=None,
                             init_bias=None) -> Network:
    """The connection-learning stack: mix -> group conv -> pool -> ReLU -> MLP.

    Also used by the layer-combination grid with the mix frozen to the
    identity (the random-connection baseline) or trained jointly.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    matrix = (np.asarray(init_matrix, np.float32) if init_matrix is not None
              else _uniform_init(rng, (n_out, n_in), n_in))
    bias = (np.asarray(init_bias, np.float32) if init_bias is not None
            else np.zeros(n_out, np.float32))
    g = scheme.group_size
    filters = _uniform_init(rng, (scheme.n_groups, kg, g, s2, s2), g * s2 * s2)
    conv_hw = feat_hw - s2 + 1
    pooled_hw = conv_hw // pool_size
    d = scheme.n_groups * kg * pooled_hw * pooled_hw
    w1 = _uniform_init(rng, (d, hidden), d)
    w2 = _uniform_init(rng, (hidden, classes), hidden)
    return Network([
        ChannelMixLayer(matrix, bias, trainable=mix_trainable),
        GroupConvLayer(scheme, filters, trainable=True),
        MaxPoolLayer(pool_size),
        ReLULayer(),
        FlattenLayer(),
        LinearLayer(w1, np.zeros(hidden, np.float32)),
        ReLULayer(),
        DropoutLayer(dropout),
        LinearLayer(w2, np.zeros(classes, np.float32)),
    ])


def train_connections(
    features,
    labels,
    scheme: GroupScheme,
    kg: int,
    s2: int,
    cfg: TrainConfig,
    hidden: int = 512,
    pool_size: int = 2,
    n_out: int | None = None,
    val_fraction: float = 0.1,
    patience: int | None = 5,
) -> ConnectionMatrix:
    """Learn the channel-mixing matrix end-to-end, then discard everything else.

    `features` are frozen previous-layer maps (N, n, h, w); `n_out` below n
    yields a dimension-reducing matrix. Early-stops on a validation plateau.
    """
    feats = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels)
    n, n_in = len(feats), feats.shape[1]
    n_out = n_out or n_in
    if scheme.n_maps != n_out:
        raise SchemeMismatchError(
            f"scheme covers {scheme.n_maps} maps but the mix emits {n_out}"
        )
    if feats.shape[2] != feats.shape[3]:
        raise SchemeMismatchError("connection training expects square maps")
    classes = int(labels.max()) + 1
    net = build_connection_network(
        n_in, n_out, scheme, kg, s2, pool_size, hidden, classes,
        cfg.dropout, feats.shape[2], cfg.seed,
    )
    val = None
    if patience is not None and val_fraction > 0.0 and n >= 20:
        n_val = max(1, int(round(n * val_fraction)))
        split = np.random.default_rng(cfg.seed).permutation(n)
        val = (feats[split[:n_val]], labels[split[:n_val]])
        train_idx = split[n_val:]
        feats, labels = feats[train_idx], labels[train_idx]
    history = fit_network(net, feats, labels, cfg, val=val, patience=patience)
    mix = net.layers[0]
    return ConnectionMatrix(
        matrix=mix.matrix.astype(np.float32),
        bias=mix.bias.astype(np.float32),
        meta={
            "labels_used": int(n),
            "epochs_run": len(history["loss"]),
            "seed": int(cfg.seed),
            "loss_history": [float(v) for v in history["loss"]],
            "val_history": [float(v) for v in history["val_error"]],
            "rng": RNG_ALGORITHM,
        },
    )


def identity_connections(n_maps: int) -> ConnectionMatrix:
    """The random-connection baseline: pre-defined scheme, no mixing."""
    return ConnectionMatrix(
        matrix=np.eye(n_maps, dtype=np.float32),
        bias=np.zeros(n_maps, np.float32),
        meta={"kind": "identity"},
    )


def shuffled_connections(n_maps: int, seed) -> ConnectionMatrix:
    """Permutation mixing, for ablations on the grouping itself."""
    perm = np.random.default_rng(seed).permutation(n_maps)
    return ConnectionMatrix(
        matrix=np.eye(n_maps, dtype=np.float32)[perm],
        bias=np.zeros(n_maps, np.float32),
        meta={"kind": "shuffled", "seed": int(seed) if np.isscalar(seed) else None},
    )


def learn_group_filters(
    features,
    scheme: GroupScheme,
    k_per_group: int,
    s2: int,
    epochs: int,
    samples_per_epoch: int,
    seed,
    zca_eps: float = ZCA_EPS,
    gcn_eps: float = GCN_EPS,
) -> list[Dictionary]:
    """Convolutional k-means per channel group of the mixed feature maps."""
    feats = np.asarray(features, dtype=np.float32)
    if scheme.n_maps != feats.shape[1]:
        raise SchemeMismatchError(
            f"scheme covers {scheme.n_maps} maps, features have {feats.shape[1]}"
        )
    group_seeds = np.random.default_rng(seed).integers(2**63, size=scheme.n_groups)
    dictionaries = []
    for (lo, hi), group_seed in zip(scheme.slices(), group_seeds):
        d = train_conv_kmeans(
            feats[:, lo:hi],
            k=k_per_group,
            c=scheme.group_size,
            s=s2,
            epochs=epochs,
            windows_per_epoch=samples_per_epoch,
            seed=int(group_seed),
            zca_eps=zca_eps,
            gcn_eps=gcn_eps,
        )
        d.meta["group"] = (lo, hi)
        dictionaries.append(d)
    return dictionaries


def build_layer3(
    features,
    labels,
    reduce_to: int,
    scheme3: GroupScheme,
    k3: int,
    s3: int,
    cfg: TrainConfig,
    seed,
    dict_epochs: int = 10,
    samples_per_epoch: int = 50_000,
    hidden: int = 512,
    pool_size: int = 4,
    features_unlabeled=None,
) -> tuple[ConnectionMatrix, list[Dictionary]]:
    """Third-layer pieces: dimension-reducing connections + group dictionaries.

    The encoder should follow these with ReLU and pool_size x pool_size
    max-pooling.
    """
    if reduce_to % scheme3.group_size != 0:
        raise NotDivisibleError(
            f"{scheme3.group_size} does not divide reduced width {reduce_to}"
        )
    connections = train_connections(
        features, labels, scheme3, kg=k3, s2=s3, cfg=cfg,
        hidden=hidden, pool_size=pool_size, n_out=reduce_to,
    )
    pool = features_unlabeled if features_unlabeled is not None else features
    mixed = apply_connections(connections, np.asarray(pool, dtype=np.float32))
    dictionaries = learn_group_filters(
        mixed, scheme3, k3, s3, epochs=dict_epochs,
        samples_per_epoch=samples_per_epoch, seed=seed,
    )
    return connections, dictionaries


def concat_multidict(branch_outputs) -> np.ndarray:
    """Concatenate flattened branch outputs in the given branch order.

    Rank >= 2 branches are treated as batches and joined per sample;
    rank-1 branches are joined into one feature vector.
    """
    arrs = [np.asarray(b) for b in branch_outputs]
    if not arrs:
        return np.empty(0, np.float32)
    if arrs[0].ndim == 1:
        return np.concatenate([a.ravel() for a in arrs])
    return np.concatenate([a.reshape(len(a), -1) for a in arrs], axis=1)
