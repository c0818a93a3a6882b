"""Declarative layer stacks and their execution over image batches.

A NetworkSpec lists layer descriptors (gcn, conv, relu, maxpool, mix,
groupconv, flatten, concat) referencing persisted artifacts by name. The
encoder resolves references through a store mapping and never applies
whitening: dictionaries already live in whitened space, inputs only get
contrast normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .connect import apply_connections, build_group_scheme, concat_multidict
from .errors import MissingPrerequisiteError, ShapeMismatchError
from .netcore import conv2d, group_conv, maxpool, relu
from .preprocess import GCN_EPS, gcn

LAYER_KINDS = (
    "gcn", "conv", "relu", "maxpool", "mix", "groupconv", "flatten", "concat",
)


@dataclass
class LayerDesc:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        params = dict(self.params)
        if self.kind == "concat":
            params["branches"] = [
                [d.to_dict() for d in branch] for branch in params["branches"]
            ]
        return {"kind": self.kind, **params}

    @classmethod
    def from_dict(cls, data: dict) -> "LayerDesc":
        data = dict(data)
        kind = data.pop("kind")
        if kind == "concat":
            data["branches"] = [
                [cls.from_dict(d) for d in branch]
                for branch in data["branches"]
            ]
        return cls(kind=kind, params=data)


@dataclass
class NetworkSpec:
    layers: list
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "layers": [d.to_dict() for d in self.layers],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        return cls(
            layers=[LayerDesc.from_dict(d) for d in data["layers"]],
            meta=dict(data.get("meta", {})),
        )

    def references(self) -> list:
        refs = []

        def walk(layers):
            for desc in layers:
                if "ref" in desc.params:
                    refs.append(desc.params["ref"])
                if desc.kind == "concat":
                    for branch in desc.params["branches"]:
                        walk(branch)

        walk(self.layers)
        return refs


def _resolve(store, ref):
    if ref not in store:
        raise MissingPrerequisiteError(f"artifact {ref!r} not in store")
    return store[ref]


def _group_filters(dicts, divisor):
    return np.stack([d.filters for d in dicts]) / np.float32(divisor)


def _apply_layer(desc: LayerDesc, x, store):
    p = desc.params
    if desc.kind == "gcn":
        return gcn(x, eps=p.get("eps", GCN_EPS))
    if desc.kind == "conv":
        dic = _resolve(store, p["ref"])
        filters = dic.filters / np.float32(p.get("divisor", 1.0))
        return conv2d(x, filters, stride=p.get("stride", 1))
    if desc.kind == "relu":
        return relu(x)
    if desc.kind == "maxpool":
        return maxpool(x, p["size"], p.get("stride"))
    if desc.kind == "mix":
        return apply_connections(_resolve(store, p["ref"]), x)
    if desc.kind == "groupconv":
        dicts = _resolve(store, p["ref"])
        scheme = build_group_scheme(
            len(dicts) * dicts[0].c, dicts[0].c
        )
        filters = _group_filters(dicts, p.get("divisor", 1.0))
        return group_conv(x, scheme, filters, stride=p.get("stride", 1))
    if desc.kind == "flatten":
        return x.reshape(len(x), -1)
    if desc.kind == "concat":
        outs = [apply_layers(branch, x, store) for branch in p["branches"]]
        return concat_multidict([o.reshape(len(o), -1) for o in outs])
    raise ValueError(f"unknown layer kind {desc.kind!r}")


def apply_layers(layers, x, store):
    for desc in layers:
        x = _apply_layer(desc, x, store)
    return x


def encode_images(spec: NetworkSpec, images, store, chunk: int = 256) -> np.ndarray:
    """Run the spec over an image batch in chunks; output is (N, d) float32."""
    arr = np.asarray(images, dtype=np.float32)
    pieces = []
    for lo in range(0, len(arr), chunk):
        out = apply_layers(spec.layers, arr[lo:lo + chunk], store)
        pieces.append(out.reshape(len(out), -1).astype(np.float32))
    if not pieces:
        return np.empty((0, 0), np.float32)
    return np.concatenate(pieces, axis=0)


def _shape_after(desc: LayerDesc, shape, store):
    c, h, w = shape
    p = desc.params
    if desc.kind in ("gcn", "relu"):
        return shape
    if desc.kind == "conv":
        dic = _resolve(store, p["ref"])
        if dic.c != c or dic.s > min(h, w):
            raise ShapeMismatchError(
                f"conv {p['ref']!r} ({dic.k},{dic.c},{dic.s},{dic.s}) "
                f"cannot apply to {shape}"
            )
        stride = p.get("stride", 1)
        return (dic.k, (h - dic.s) // stride + 1, (w - dic.s) // stride + 1)
    if desc.kind == "maxpool":
        size = p["size"]
        stride = p.get("stride") or size
        if size > min(h, w):
            raise ShapeMismatchError(f"pool size {size} exceeds {shape}")
        return (c, (h - size) // stride + 1, (w - size) // stride + 1)
    if desc.kind == "mix":
        conn = _resolve(store, p["ref"])
        if conn.n_in != c:
            raise ShapeMismatchError(
                f"mix {p['ref']!r} expects {conn.n_in} maps, got {c}"
            )
        return (conn.n_out, h, w)
    if desc.kind == "groupconv":
        dicts = _resolve(store, p["ref"])
        g, s = dicts[0].c, dicts[0].s
        if len(dicts) * g != c or s > min(h, w):
            raise ShapeMismatchError(
                f"groupconv {p['ref']!r} ({len(dicts)} groups of {g}) "
                f"cannot apply to {shape}"
            )
        stride = p.get("stride", 1)
        hw = ((h - s) // stride + 1, (w - s) // stride + 1)
        return (len(dicts) * dicts[0].k, *hw)
    if desc.kind == "flatten":
        return (c * h * w,)
    if desc.kind == "concat":
        total = 0
        for branch in p["branches"]:
            sub = shape
            for d in branch:
                sub = _shape_after(d, sub, store)
            total += int(np.prod(sub))
        return (total,)
    raise ValueError(f"unknown layer kind {desc.kind!r}")


def validate_spec(spec: NetworkSpec, store, input_shape) -> tuple:
    """Dry-run shape composition; raises before any compute when invalid."""
    shape = tuple(input_shape)
    for desc in spec.layers:
        shape = _shape_after(desc, shape, store)
    return shape
