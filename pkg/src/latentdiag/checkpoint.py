"""Versioned container for named arrays plus JSON metadata.

Layout (all integers little-endian)::

    8 bytes   magic  b"LDCKPT\\x00\\x01"
    4 bytes   uint32 header length N
    N bytes   UTF-8 JSON header: {"version", "metadata", "arrays": [
                  {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    ...       raw array bytes, C order, little-endian, offsets relative
              to the end of the header

Array order and the JSON key order are fixed, so identical inputs give
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LDCKPT\x00\x01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def dumps(arrays: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, value in arrays.items():
        arr = _le(np.asarray(value))
        if arr.dtype.kind not in "fiub":
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.newbyteorder("<").str if arr.dtype.itemsize > 1 else arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "metadata": dict(metadata or {}), "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode())
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    body = memoryview(data)[12 + n:]
    arrays = {}
    for e in header["arrays"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["metadata"]


def save(path, arrays: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, metadata))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def module_arrays(prefix: str, module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module(prefix: str, module, arrays: Mapping[str, np.ndarray]) -> None:
    import torch

    own = module.state_dict()
    state = {}
    for key, ref in own.items():
        name = f"{prefix}/{key}"
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks array {name!r}")
        value = arrays[name]
        if tuple(value.shape) != tuple(ref.shape):
            raise CheckpointError(f"array {name!r} has shape {value.shape}, expected {tuple(ref.shape)}")
        state[key] = torch.from_numpy(np.array(value))
    module.load_state_dict(state)
