"""Versioned binary container for named parameter tensors.

Layout: 8-byte magic, little-endian uint32 header length, JSON header
listing tensor names/shapes/dtypes in order, then the raw little-endian
row-major array bytes back to back.  Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError
from .tensor import Tensor

MAGIC = b"SNCKPT01"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(params: dict[str, Tensor], path: str) -> None:
    entries = []
    blobs = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data)
        if str(arr.dtype) not in _DTYPES:
            raise DataError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(arr.astype(_DTYPES[str(arr.dtype)]).tobytes())
    header = json.dumps({"version": VERSION, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        out: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            dtype = _DTYPES.get(entry["dtype"])
            if dtype is None:
                raise DataError(f"{path}: unknown dtype {entry['dtype']!r}")
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * np.dtype(dtype).itemsize)
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(entry["dtype"])
            out[entry["name"]] = arr
        return out


def restore_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Load saved arrays into an existing parameter set (shapes must match)."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise DataError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise DataError(f"tensor {name!r}: shape {arr.shape} != expected {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
