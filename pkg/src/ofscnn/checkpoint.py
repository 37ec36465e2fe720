"""Single-file checkpoint: a JSON header followed by OFST tensor records.

Layout (integers little-endian)::

    b"OFSC" | u16 version | u32 header length | header JSON (utf-8) | tensors...

The header lists tensor names in storage order under "tensors" and carries
scalar state under "scalars".
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import FormatError, decode_tensor, encode_tensor

MAGIC = b"OFSC"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


def save_checkpoint(path, state: dict, meta: dict | None = None) -> None:
    names, blobs, scalars = [], [], {}
    for key, value in state.items():
        if isinstance(value, np.ndarray):
            names.append(key)
            blobs.append(encode_tensor(value))
        else:
            scalars[key] = value
    header = json.dumps({"meta": meta or {}, "scalars": scalars, "tensors": names},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(meta, state)`` where ``state`` mixes scalars and arrays."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, n = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = _HEAD.size
    try:
        header = json.loads(buf[pos:pos + n])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    pos += n
    state = dict(header["scalars"])
    for name in header["tensors"]:
        state[name], pos = decode_tensor(buf, pos, exact=False)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes after last tensor")
    return header["meta"], state
