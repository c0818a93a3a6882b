"""Minimal deterministic CPU network engine.

Valid (unpadded) convolution, max-pooling, ReLU, 1x1 channel mixing with
bias, grouped convolution, a two-layer softmax classifier with inverted
dropout, SGD with classical momentum, exact reverse-mode gradients and a
finite-difference gradient checker. Forward compute is single precision;
the gradient checker runs a double-precision copy of the network.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dictlearn import Dictionary
from .errors import (
    DivergedLossError,
    NonPositiveDivisorError,
    SchemeMismatchError,
    ShapeMismatchError,
)

# ---------------------------------------------------------------------------
# Stateless tensor ops


def _window_view(x: np.ndarray, s1: int, s2: int, stride: int) -> np.ndarray:
    view = sliding_window_view(x, (s1, s2), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatchError(f"expected rank 3 or 4 input, got shape {x.shape}")


def conv2d(x, filters, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation, no bias: (N,c,h,w) x (k,c,s,s) -> (N,k,h',w')."""
    xb, squeeze = _batched(x)
    filters = np.asarray(filters)
    if filters.ndim != 4 or filters.shape[1] != xb.shape[1]:
        raise ShapeMismatchError(
            f"filters {filters.shape} do not match input channels {xb.shape[1]}"
        )
    s = filters.shape[2]
    if s > xb.shape[2] or filters.shape[3] > xb.shape[3]:
        raise ShapeMismatchError(
            f"filter side {s} exceeds input extent {xb.shape[2:]}"
        )
    view = _window_view(xb, s, filters.shape[3], stride)
    out = np.einsum("nchwij,kcij->nkhw", view, filters, optimize=True)
    return out[0] if squeeze else out


def maxpool(x, size: int, stride: int | None = None) -> np.ndarray:
    """Per-channel max over windows; trailing remainder is dropped."""
    xb, squeeze = _batched(x)
    if size > xb.shape[2] or size > xb.shape[3]:
        raise ShapeMismatchError(
            f"pool size {size} exceeds input extent {xb.shape[2:]}"
        )
    view = _window_view(xb, size, size, stride or size)
    out = view.max(axis=(4, 5))
    return out[0] if squeeze else out


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def channel_mix(maps, matrix, bias) -> np.ndarray:
    """1x1 channel mixing: out[i] = sum_j M[i,j] * maps[j] + bias[i]."""
    xb, squeeze = _batched(maps)
    matrix = np.asarray(matrix)
    bias = np.asarray(bias)
    if matrix.ndim != 2 or matrix.shape[1] != xb.shape[1]:
        raise ShapeMismatchError(
            f"matrix {matrix.shape} does not match {xb.shape[1]} input maps"
        )
    if bias.shape != (matrix.shape[0],):
        raise ShapeMismatchError(
            f"bias {bias.shape} does not match {matrix.shape[0]} output maps"
        )
    out = np.einsum("mc,nchw->nmhw", matrix, xb)
    out = out + bias[None, :, None, None]
    return out[0] if squeeze else out


def group_conv(maps, scheme, filters, stride: int = 1) -> np.ndarray:
    """Independent valid convolution per channel group, outputs concatenated.

    `filters` is (G, kg, g, s, s) or a sequence of per-group (kg, g, s, s).
    """
    xb, squeeze = _batched(maps)
    slices = scheme.slices()
    if scheme.n_maps != xb.shape[1]:
        raise SchemeMismatchError(
            f"scheme covers {scheme.n_maps} maps, input has {xb.shape[1]}"
        )
    if len(filters) != len(slices):
        raise SchemeMismatchError(
            f"{len(filters)} filter groups for {len(slices)} scheme groups"
        )
    outs = []
    for (lo, hi), f in zip(slices, filters):
        f = np.asarray(f)
        if f.shape[1] != hi - lo:
            raise SchemeMismatchError(
                f"group filters expect {f.shape[1]} channels, group has {hi - lo}"
            )
        outs.append(conv2d(xb[:, lo:hi], f, stride))
    out = np.concatenate(outs, axis=1)
    return out[0] if squeeze else out


def scale_dictionary(dictionary: Dictionary, divisor: float) -> Dictionary:
    """Divide all filter values by a constant before baking into a conv layer."""
    if divisor <= 0:
        raise NonPositiveDivisorError(f"divisor must be > 0, got {divisor}")
    scaled = (dictionary.filters / np.float32(divisor)).astype(np.float32)
    meta = dict(dictionary.meta)
    meta["divisor"] = float(divisor)
    return Dictionary(filters=scaled, meta=meta, whitening=dictionary.whitening)


# ---------------------------------------------------------------------------
# Trainable layers


class Layer:
    trainable = False

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def params(self):
        """List of (param, grad) array pairs; grads valid after backward."""
        return []

    def kink_margin(self):
        """Distance of the last forward pass from a non-differentiable point."""
        return np.inf

    def astype(self, dtype):
        import copy

        return copy.copy(self)


class ConvLayer(Layer):
    def __init__(self, filters, stride=1, trainable=False):
        self.filters = np.asarray(filters)
        self.stride = stride
        self.trainable = trainable
        self.d_filters = np.zeros_like(self.filters)
        self._view = None

    def forward(self, x, train=False):
        s1, s2 = self.filters.shape[2], self.filters.shape[3]
        self._view = _window_view(x, s1, s2, self.stride)
        self._in_shape = x.shape
        return np.einsum("nchwij,kcij->nkhw", self._view, self.filters,
                         optimize=True)

    def backward(self, dout):
        self.d_filters = np.einsum("nchwij,nkhw->kcij", self._view, dout,
                                   optimize=True)
        n, c, h, w = self._in_shape
        k, _, s1, s2 = self.filters.shape
        dx = np.zeros(self._in_shape, dtype=dout.dtype)
        hp, wp = dout.shape[2], dout.shape[3]
        for i in range(s1):
            for j in range(s2):
                dx[:, :, i:i + self.stride * hp:self.stride,
                   j:j + self.stride * wp:self.stride] += np.einsum(
                    "nkhw,kc->nchw", dout, self.filters[:, :, i, j],
                    optimize=True)
        return dx

    def params(self):
        return [(self.filters, self.d_filters)] if self.trainable else []

    def astype(self, dtype):
        out = ConvLayer(self.filters.astype(dtype), self.stride, self.trainable)
        return out


class GroupConvLayer(Layer):
    def __init__(self, scheme, filters, stride=1, trainable=False):
        # filters: (G, kg, g, s, s)
        self.scheme = scheme
        self.filters = np.asarray(filters)
        self.stride = stride
        self.trainable = trainable
        self._convs = [
            ConvLayer(self.filters[g], stride, trainable)
            for g in range(len(self.filters))
        ]

    def forward(self, x, train=False):
        if self.scheme.n_maps != x.shape[1]:
            raise SchemeMismatchError(
                f"scheme covers {self.scheme.n_maps} maps, input has {x.shape[1]}"
            )
        outs = []
        for (lo, hi), conv in zip(self.scheme.slices(), self._convs):
            outs.append(conv.forward(x[:, lo:hi], train))
        self._kg = outs[0].shape[1]
        return np.concatenate(outs, axis=1)

    def backward(self, dout):
        dxs = []
        for g, conv in enumerate(self._convs):
            dxs.append(conv.backward(dout[:, g * self._kg:(g + 1) * self._kg]))
        return np.concatenate(dxs, axis=1)

    def params(self):
        out = []
        for conv in self._convs:
            out.extend(conv.params())
        return out

    def astype(self, dtype):
        return GroupConvLayer(self.scheme, self.filters.astype(dtype),
                              self.stride, self.trainable)


class ChannelMixLayer(Layer):
    def __init__(self, matrix, bias, trainable=True):
        self.matrix = np.asarray(matrix)
        self.bias = np.asarray(bias)
        self.trainable = trainable
        self.d_matrix = np.zeros_like(self.matrix)
        self.d_bias = np.zeros_like(self.bias)

    def forward(self, x, train=False):
        self._x = x
        return channel_mix(x, self.matrix, self.bias)

    def backward(self, dout):
        self.d_matrix = np.einsum("nmhw,nchw->mc", dout, self._x, optimize=True)
        self.d_bias = dout.sum(axis=(0, 2, 3))
        return np.einsum("mc,nmhw->nchw", self.matrix, dout, optimize=True)

    def params(self):
        if not self.trainable:
            return []
        return [(self.matrix, self.d_matrix), (self.bias, self.d_bias)]

    def astype(self, dtype):
        return ChannelMixLayer(self.matrix.astype(dtype),
                               self.bias.astype(dtype), self.trainable)


class MaxPoolLayer(Layer):
    def __init__(self, size, stride=None):
        self.size = size
        self.stride = stride or size

    def forward(self, x, train=False):
        self._in_shape = x.shape
        view = _window_view(x, self.size, self.size, self.stride)
        n, c, hp, wp = view.shape[:4]
        flat = view.reshape(n, c, hp, wp, -1)
        self._arg = flat.argmax(axis=-1)
        self._gap = None
        if flat.shape[-1] > 1:
            part = np.partition(flat, -2, axis=-1)
            self._gap = float((part[..., -1] - part[..., -2]).min())
        return np.take_along_axis(flat, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        n, c, hp, wp = dout.shape
        dx = np.zeros(self._in_shape, dtype=dout.dtype)
        rows = self._arg // self.size + self.stride * np.arange(hp)[None, None, :, None]
        cols = self._arg % self.size + self.stride * np.arange(wp)[None, None, None, :]
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dx, (np.broadcast_to(ni, dout.shape),
                       np.broadcast_to(ci, dout.shape), rows, cols), dout)
        return dx

    def kink_margin(self):
        return np.inf if self._gap is None else self._gap


class ReLULayer(Layer):
    def forward(self, x, train=False):
        self._x = x
        return np.maximum(x, 0)

    def backward(self, dout):
        return dout * (self._x > 0)

    def kink_margin(self):
        return float(np.abs(self._x).min()) if self._x.size else np.inf


class FlattenLayer(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(len(x), -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class DropoutLayer(Layer):
    """Inverted dropout: active only in training, identity at inference."""

    def __init__(self, rate, seed=0):
        self.rate = rate
        self.reseed(seed)

    def reseed(self, seed):
        self._rng = np.random.default_rng(seed)

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self._rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask

    def astype(self, dtype):
        return DropoutLayer(self.rate)


class LinearLayer(Layer):
    def __init__(self, weight, bias, trainable=True):
        self.weight = np.asarray(weight)   # (d_in, d_out)
        self.bias = np.asarray(bias)
        self.trainable = trainable
        self.d_weight = np.zeros_like(self.weight)
        self.d_bias = np.zeros_like(self.bias)

    def forward(self, x, train=False):
        self._x = x
        return x @ self.weight + self.bias

    def backward(self, dout):
        self.d_weight = self._x.T @ dout
        self.d_bias = dout.sum(axis=0)
        return dout @ self.weight.T

    def params(self):
        if not self.trainable:
            return []
        return [(self.weight, self.d_weight), (self.bias, self.d_bias)]

    def astype(self, dtype):
        return LinearLayer(self.weight.astype(dtype), self.bias.astype(dtype),
                           self.trainable)


class Network:
    """An ordered layer stack with reverse-mode differentiation."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def kink_margin(self):
        return min(layer.kink_margin() for layer in self.layers)

    def astype(self, dtype):
        return Network([layer.astype(dtype) for layer in self.layers])

    def state(self):
        return [p.copy() for p, _ in self.params()]

    def set_state(self, state):
        for (p, _), saved in zip(self.params(), state):
            p[...] = saved


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    n = len(labels)
    nll = -(shifted[np.arange(n), labels]
            - np.log(expv.sum(axis=1)))
    loss = float(nll.mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def backprop(network: Network, x, labels, train=False):
    """Forward + loss + reverse pass; returns (loss, grads aligned to params)."""
    logits = network.forward(x, train=train)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    network.backward(dlogits)
    return loss, [g for _, g in network.params()]


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    """SGD hyperparameters; defaults follow lr 0.1 / momentum 0.9 / dropout 0.5."""

    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def fit_network(network: Network, x, labels, cfg: TrainConfig,
                val=None, patience=None):
    """Mini-batch SGD with classical momentum; deterministic given cfg.seed.

    With `val=(x_val, y_val)` and `patience`, stops after `patience` epochs
    without a new best validation error and restores the best parameters.
    Returns a history dict with per-epoch mean loss (and val errors).
    """
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_seed, drop_seed = ss.spawn(2)
    rng = np.random.default_rng(shuffle_seed)
    drop_ss = np.random.SeedSequence(drop_seed.entropy)
    for layer, child in zip(
        [l for l in network.layers if isinstance(l, DropoutLayer)],
        drop_ss.spawn(
            max(1, sum(isinstance(l, DropoutLayer) for l in network.layers))
        ),
    ):
        layer.reseed(child)

    x = np.ascontiguousarray(x, dtype=np.float32)
    labels = np.asarray(labels)
    velocity = [np.zeros_like(p) for p, _ in network.params()]
    history = {"loss": [], "val_error": []}
    best_err, best_state, stall = np.inf, None, 0

    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        losses = []
        for lo in range(0, len(x), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, _ = backprop(network, x[idx], labels[idx], train=True)
            if not np.isfinite(loss):
                raise DivergedLossError(f"loss became {loss}")
            losses.append(loss)
            for v, (p, g) in zip(velocity, network.params()):
                v *= cfg.momentum
                v -= cfg.lr * g
                p += v
        history["loss"].append(float(np.mean(losses)))
        if val is not None:
            logits = network.forward(val[0], train=False)
            err = float((logits.argmax(axis=1) != val[1]).mean())
            history["val_error"].append(err)
            if patience is not None:
                if err < best_err - 1e-12:
                    best_err, best_state, stall = err, network.state(), 0
                else:
                    stall += 1
                    if stall > patience:
                        break
    if best_state is not None:
        network.set_state(best_state)
    return history


# ---------------------------------------------------------------------------
# Two-layer classifier


@dataclass
class MlpModel:
    """Flatten -> Linear(d,H) -> ReLU -> Dropout -> Linear(H,C) classifier."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    dropout: float
    meta: dict = field(default_factory=dict)

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_mlp_network(d, hidden, classes, dropout, seed):
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    w1 = _uniform_init(rng, (d, hidden), d)
    b1 = np.zeros(hidden, np.float32)
    w2 = _uniform_init(rng, (hidden, classes), hidden)
    b2 = np.zeros(classes, np.float32)
    return Network([
        FlattenLayer(),
        LinearLayer(w1, b1),
        ReLULayer(),
        DropoutLayer(dropout),
        LinearLayer(w2, b2),
    ])


def train_mlp(features, labels, cfg: TrainConfig, hidden: int,
              classes: int | None = None, val=None, patience=None) -> MlpModel:
    """Train the two-layer classifier on flat features."""
    feats = np.asarray(features, dtype=np.float32).reshape(len(features), -1)
    labels = np.asarray(labels)
    n_classes = classes or int(labels.max()) + 1
    net = build_mlp_network(feats.shape[1], hidden, n_classes, cfg.dropout,
                            cfg.seed)
    history = fit_network(net, feats, labels, cfg, val=val, patience=patience)
    linear = [l for l in net.layers if isinstance(l, LinearLayer)]
    return MlpModel(
        w1=linear[0].weight, b1=linear[0].bias,
        w2=linear[1].weight, b2=linear[1].bias,
        dropout=cfg.dropout,
        meta={"history": history, "config": vars(cfg).copy(),
              "hidden": hidden, "classes": n_classes},
    )


def mlp_logits(model: MlpModel, features) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float32).reshape(len(features), -1)
    if feats.shape[1] != model.w1.shape[0]:
        raise ShapeMismatchError(
            f"features have dim {feats.shape[1]}, model expects {model.w1.shape[0]}"
        )
    hidden = np.maximum(feats @ model.w1 + model.b1, 0)
    return hidden @ model.w2 + model.b2


def predict(model: MlpModel, features) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class id."""
    return mlp_logits(model, features).argmax(axis=1)


def evaluate(model: MlpModel, features, labels) -> float:
    """Fraction misclassified; an empty set evaluates to 0 with a warning."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        warnings.warn("evaluate called on an empty set; error defined as 0.0")
        return 0.0
    return float((predict(model, features) != labels).mean())


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(network: Network, x, labels, eps: float = 1e-4,
               max_params: int = 200, seed: int = 0,
               fault_factor: float | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs a double-precision copy of the network with dropout inactive
    (inference-mode forward). `fault_factor` scales the analytic gradients
    to verify that the check detects planted faults.
    """
    net = network.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)

    _, grads = backprop(net, x64, labels, train=False)
    params = net.params()
    sizes = [p.size for p, _ in params]
    total = int(np.sum(sizes))
    rng = np.random.default_rng(seed)
    count = min(max_params, total)
    chosen = rng.choice(total, size=count, replace=False)

    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for flat_index in chosen:
        pi = int(np.searchsorted(offsets, flat_index, side="right")) - 1
        local = int(flat_index - offsets[pi])
        param = params[pi][0]
        orig = param.flat[local]
        param.flat[local] = orig + eps
        lp, _ = softmax_cross_entropy(net.forward(x64, train=False), labels)
        param.flat[local] = orig - eps
        lm, _ = softmax_cross_entropy(net.forward(x64, train=False), labels)
        param.flat[local] = orig
        fd = (lp - lm) / (2 * eps)
        analytic = grads[pi].flat[local]
        if fault_factor is not None:
            analytic = analytic * fault_factor
        rel = abs(analytic - fd) / max(abs(analytic) + abs(fd), 1e-12)
        worst = max(worst, rel)
    return worst
