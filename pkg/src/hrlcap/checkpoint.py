"""Self-describing JSON checkpoints.

Layout::

    {"format": "hrlcap-checkpoint", "version": 1,
     "params": {name: {"shape": [...], "values": [...row-major...]}},
     "meta": {...}}

Floats are written with ``repr`` precision, so a write/read round trip is
bit-exact. Any numpy array nested inside ``meta`` is encoded the same way.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import LoadError

FORMAT = "hrlcap-checkpoint"
VERSION = 1


def _encode(obj):
    if isinstance(obj, np.ndarray):
        return {"__array__": True, "shape": list(obj.shape), "dtype": obj.dtype.str,
                "values": obj.reshape(-1).tolist()}
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        if obj.get("__array__"):
            return np.asarray(obj["values"], dtype=np.dtype(obj["dtype"])).reshape(obj["shape"])
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "params": {k: {"shape": list(np.shape(v)), "values": np.asarray(v, dtype=np.float64).reshape(-1).tolist()}
                   for k, v in params.items()},
        "meta": _encode(meta or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format") != FORMAT:
        raise LoadError(f"{path}: not an {FORMAT} file")
    if doc.get("version") != VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {}
    for name, rec in doc["params"].items():
        vals = np.asarray(rec["values"], dtype=np.float64)
        if vals.size != int(np.prod(rec["shape"], dtype=np.int64)):
            raise LoadError(f"{path}: parameter {name} has {vals.size} values for shape {rec['shape']}")
        params[name] = vals.reshape(rec["shape"])
    return params, _decode(doc.get("meta", {}))
