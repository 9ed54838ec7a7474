"""Binary tensor container.

Layout::

    b"OFM1" | uint32 version | uint64 header length | JSON header | payload

The header holds free-form metadata plus a ``tensors`` manifest of
name/shape/dtype/offset/nbytes entries; offsets are relative to the start
of the payload and strictly increasing.  Tensors are stored little-endian
and contiguous, in manifest order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .fno import FNOConfig, OperatorParams

MAGIC = b"OFM1"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def save_container(path, tensors: dict, meta: dict | None = None) -> None:
    manifest, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, order="C")  # keeps 0-d arrays 0-d
        if arr.dtype.kind not in "fiu":
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = dict(meta or {})
    header["tensors"] = manifest
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_container(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a container")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size + hlen
    if start > len(data):
        raise CheckpointError(f"{path}: header runs past end of file")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    tensors, prev = {}, -1
    payload = len(data) - start
    for entry in header.get("tensors", []):
        off, nb = int(entry["offset"]), int(entry["nbytes"])
        if off <= prev and nb:
            raise CheckpointError(f"{path}: manifest offsets are not increasing at {entry['name']!r}")
        if off < 0 or off + nb > payload:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} lies outside the payload")
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) * dt.itemsize != nb:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} size does not match its shape")
        arr = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)), offset=start + off).reshape(shape)
        tensors[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        prev = off if nb else prev
    return tensors, header


def save_params(path, params: OperatorParams, meta: dict | None = None) -> None:
    header = dict(meta or {})
    header["kind"] = "operator"
    header["fno"] = params.config.to_dict()
    save_container(path, params.tensors, header)


def load_params(path) -> tuple[OperatorParams, dict]:
    tensors, header = load_container(path)
    if header.get("kind") != "operator":
        raise CheckpointError(f"{path}: not an operator checkpoint (kind={header.get('kind')!r})")
    cfg = FNOConfig(**header["fno"])
    try:
        return OperatorParams(cfg, tensors), header
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
