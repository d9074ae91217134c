"""Parameter blob: one JSON header line, then little-endian raw arrays."""

from __future__ import annotations

import json
from collections import OrderedDict

import numpy as np

_DTYPES = {"float64": "<f8", "float32": "<f4"}


def dump_blob(arrays: dict, fh, dtype: str = "float64") -> None:
    table = OrderedDict()
    offset = 0
    encoded = []
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        table[name] = {"dtype": dtype, "shape": list(np.shape(arr)), "offset": offset}
        encoded.append(raw)
        offset += len(raw)
    fh.write(json.dumps(table, separators=(",", ":")).encode("utf-8") + b"\n")
    for raw in encoded:
        fh.write(raw)


def load_blob(fh) -> "OrderedDict[str, np.ndarray]":
    table = json.loads(fh.readline().decode("utf-8"))
    payload = fh.read()
    out = OrderedDict()
    for name, entry in table.items():
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=entry["offset"])
        out[name] = arr.reshape(entry["shape"]).astype(np.float64)
    return out


def save_blob(path, arrays: dict, dtype: str = "float64") -> None:
    with open(path, "wb") as fh:
        dump_blob(arrays, fh, dtype)


def read_blob(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return load_blob(fh)
