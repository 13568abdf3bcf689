"""Versioned binary container for path bundles, regression estimates and CV models.

Layout (all integers little-endian)::

    b"WKCV"            magic
    uint16             format version
    8 bytes            kind tag, ASCII, NUL padded ("paths", "regest", "cvmodel")
    8 bytes            model id hash
    uint32             length of the JSON metadata block
    JSON metadata      includes an "arrays" list of {name, dtype, shape}
    raw array bytes    in the listed order; floats as little-endian float64
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ContractViolation

MAGIC = b"WKCV"
VERSION = 1
_HEAD = struct.Struct("<4sH8s8sI")

_DTYPES = {"f8": "<f8", "i1": "|i1", "i8": "<i8"}


def _code(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f8"
    if arr.dtype == np.int8:
        return "i1"
    if arr.dtype.kind in "iu":
        return "i8"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def save(path, kind: str, model_hash: bytes, meta: dict, arrays: dict) -> None:
    descr = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        descr.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = json.dumps({**meta, "arrays": descr}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, kind.encode().ljust(8, b"\0"), model_hash, len(body)))
        fh.write(body)
        for blob in blobs:
            fh.write(blob)


def load(path, kind: str, model_hash: bytes | None = None):
    """Read a container, checking magic, version, kind and (optionally) model hash."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEAD.size:
        raise ContractViolation(f"{path}: truncated container")
    magic, version, tag, mhash, n = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise ContractViolation(f"{path}: not a weakcv container")
    if version != VERSION:
        raise ContractViolation(f"{path}: unsupported container version {version}")
    found = tag.rstrip(b"\0").decode()
    if found != kind:
        raise ContractViolation(f"{path}: holds {found!r}, expected {kind!r}")
    if model_hash is not None and mhash != model_hash:
        raise ContractViolation(f"{path}: written for a different model")
    pos = _HEAD.size
    meta = json.loads(raw[pos : pos + n])
    pos += n
    arrays = {}
    for d in meta.pop("arrays"):
        dt = np.dtype(_DTYPES[d["dtype"]])
        count = int(np.prod(d["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(d["shape"])
        arrays[d["name"]] = arr.astype(dt.newbyteorder("="))
        pos += count * dt.itemsize
    return meta, arrays
