"""Self-describing binary artifact files.

Layout (all integers little-endian u32):

    magic   4 bytes  b"CVKM"
    version u32      currently 1
    kindlen u32, kind bytes (ascii tag: dictionary, whitening, ...)
    metalen u32, meta bytes (canonical JSON)
    rank    u32, dims rank*u32   -- shape of the payload as stored
    payload prod(dims) float32 little-endian, nothing after it

Multi-array artifacts store the concatenation of their arrays as a rank-1
payload; meta["arrays"] records each array's name, shape and logical dtype
in payload order, so loading never needs the producing config.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .connect import ConnectionMatrix
from .dictlearn import Dictionary
from .encoder import NetworkSpec
from .errors import (
    BadMagicError,
    PayloadLengthMismatchError,
    VersionUnsupportedError,
)
from .netcore import MlpModel
from .preprocess import WhiteningTransform

MAGIC = b"CVKM"
VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_artifact(path, kind: str, arrays, meta: dict | None = None) -> None:
    """Write arrays (list of (name, ndarray)) atomically as one artifact."""
    meta = dict(meta or {})
    meta["arrays"] = [
        {
            "name": name,
            "shape": list(np.asarray(a).shape),
            "dtype": str(np.asarray(a).dtype),
        }
        for name, a in arrays
    ]
    flats = [np.asarray(a, dtype=np.float32).ravel() for _, a in arrays]
    payload = np.concatenate(flats) if flats else np.empty(0, np.float32)
    if len(arrays) == 1:
        dims = np.asarray(arrays[0][1]).shape
    else:
        dims = (payload.size,)
    meta_bytes = _canonical_json(meta)
    kind_bytes = kind.encode("ascii")

    header = bytearray()
    header += MAGIC
    header += struct.pack("<I", VERSION)
    header += struct.pack("<I", len(kind_bytes)) + kind_bytes
    header += struct.pack("<I", len(meta_bytes)) + meta_bytes
    header += struct.pack("<I", len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(header))
            fh.write(payload.astype("<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_artifact(path):
    """Read (kind, {name: array}, meta) back; payload must match the header."""
    buf = Path(path).read_bytes()
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a convclust artifact")
    version = struct.unpack_from("<I", buf, 4)[0]
    if version != VERSION:
        raise VersionUnsupportedError(f"{path}: version {version}")
    off = 8
    klen = struct.unpack_from("<I", buf, off)[0]
    off += 4
    kind = buf[off:off + klen].decode("ascii")
    off += klen
    mlen = struct.unpack_from("<I", buf, off)[0]
    off += 4
    meta = json.loads(buf[off:off + mlen].decode())
    off += mlen
    rank = struct.unpack_from("<I", buf, off)[0]
    off += 4
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    expected = off + 4 * count
    if len(buf) != expected:
        raise PayloadLengthMismatchError(
            f"{path}: payload is {len(buf) - off} bytes, header promises "
            f"{4 * count}"
        )
    payload = np.frombuffer(buf, dtype="<f4", count=count, offset=off)

    arrays = {}
    cursor = 0
    for entry in meta["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        part = payload[cursor:cursor + size].reshape(entry["shape"])
        if entry["dtype"] != "float32":
            part = part.astype(entry["dtype"])
        else:
            part = part.copy()
        arrays[entry["name"]] = part
        cursor += size
    return kind, arrays, meta


def artifact_meta(path) -> dict:
    _, _, meta = load_artifact(path)
    return meta


# --- typed wrappers ---------------------------------------------------------


def save_dictionary(path, dictionary: Dictionary, config_hash=None):
    meta = {"dict_meta": dictionary.meta}
    if config_hash:
        meta["config_hash"] = config_hash
    arrays = [("filters", dictionary.filters)]
    if dictionary.whitening is not None:
        arrays += [
            ("whitening_mean", dictionary.whitening.mean),
            ("whitening_matrix", dictionary.whitening.matrix),
        ]
        meta["whitening_eps"] = dictionary.whitening.eps
    save_artifact(path, "dictionary", arrays, meta)


def load_dictionary(path) -> Dictionary:
    kind, arrays, meta = load_artifact(path)
    whitening = None
    if "whitening_mean" in arrays:
        whitening = WhiteningTransform(
            mean=arrays["whitening_mean"],
            matrix=arrays["whitening_matrix"],
            eps=meta.get("whitening_eps", 0.0),
        )
    return Dictionary(
        filters=arrays["filters"],
        meta=dict(meta.get("dict_meta", {})),
        whitening=whitening,
    )


def save_dictionaries(path, dictionaries, config_hash=None):
    """Persist a list of group dictionaries in one artifact."""
    arrays = [
        (f"filters_{i:03d}", d.filters) for i, d in enumerate(dictionaries)
    ]
    meta = {
        "group_count": len(dictionaries),
        "dict_meta": [d.meta for d in dictionaries],
    }
    if config_hash:
        meta["config_hash"] = config_hash
    save_artifact(path, "dictionary-list", arrays, meta)


def load_dictionaries(path) -> list:
    _, arrays, meta = load_artifact(path)
    out = []
    for i in range(meta["group_count"]):
        out.append(
            Dictionary(
                filters=arrays[f"filters_{i:03d}"],
                meta=dict(meta["dict_meta"][i]),
            )
        )
    return out


def save_whitening(path, transform: WhiteningTransform, config_hash=None):
    meta = {"eps": transform.eps, "transform_meta": transform.meta}
    if config_hash:
        meta["config_hash"] = config_hash
    save_artifact(
        path, "whitening",
        [("mean", transform.mean), ("matrix", transform.matrix)], meta,
    )


def load_whitening(path) -> WhiteningTransform:
    _, arrays, meta = load_artifact(path)
    return WhiteningTransform(
        mean=arrays["mean"], matrix=arrays["matrix"], eps=meta["eps"],
        meta=dict(meta.get("transform_meta", {})),
    )


def save_connections(path, connections: ConnectionMatrix, config_hash=None):
    meta = {"conn_meta": connections.meta}
    if config_hash:
        meta["config_hash"] = config_hash
    save_artifact(
        path, "connmatrix",
        [("matrix", connections.matrix), ("bias", connections.bias)], meta,
    )


def load_connections(path) -> ConnectionMatrix:
    _, arrays, meta = load_artifact(path)
    return ConnectionMatrix(
        matrix=arrays["matrix"], bias=arrays["bias"],
        meta=dict(meta.get("conn_meta", {})),
    )


def save_mlp(path, model: MlpModel, config_hash=None):
    meta = {"dropout": model.dropout, "mlp_meta": model.meta}
    if config_hash:
        meta["config_hash"] = config_hash
    save_artifact(
        path, "mlpmodel",
        [("w1", model.w1), ("b1", model.b1), ("w2", model.w2), ("b2", model.b2)],
        meta,
    )


def load_mlp(path) -> MlpModel:
    _, arrays, meta = load_artifact(path)
    return MlpModel(
        w1=arrays["w1"], b1=arrays["b1"], w2=arrays["w2"], b2=arrays["b2"],
        dropout=meta["dropout"], meta=dict(meta.get("mlp_meta", {})),
    )


def save_netspec(path, spec: NetworkSpec, config_hash=None):
    meta = {"spec": spec.to_dict()}
    if config_hash:
        meta["config_hash"] = config_hash
    save_artifact(path, "netspec", [], meta)


def load_netspec(path) -> NetworkSpec:
    _, _, meta = load_artifact(path)
    return NetworkSpec.from_dict(meta["spec"])


def save_features(path, features, labels=None, config_hash=None):
    arrays = [("features", features)]
    if labels is not None:
        arrays.append(("labels", np.asarray(labels)))
    meta = {"config_hash": config_hash} if config_hash else {}
    save_artifact(path, "features", arrays, meta)


def load_features(path):
    _, arrays, _ = load_artifact(path)
    return arrays["features"], arrays.get("labels")
