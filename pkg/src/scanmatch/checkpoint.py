"""Versioned binary container for model parameters.

Layout (all integers little-endian)::

    b"SCNP"  u32 version  u32 meta_len  meta_len bytes of UTF-8 JSON
    u32 tensor_count
    per tensor: u16 name_len, name, u32 ndim, ndim x u32 dims, float64 LE values
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .encoders import ModelParams, param_names
from .errors import FormatError

MAGIC = b"SCNP"
VERSION = 1


def atomic_write(path, data):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(params, meta=None):
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes]
    items = params.items()
    parts.append(struct.pack("<I", len(items)))
    for name, arr in items:
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf):
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint reading {what}: need {n} bytes, "
                              f"{len(buf) - pos} left", pos)
        chunk = buf[pos: pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    version, meta_len = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    try:
        meta = json.loads(take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}", 12) from None
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * size, f"values of {name}"), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    unknown = set(arrays) - set(param_names())
    if unknown:
        raise FormatError(f"unknown tensors in checkpoint: {sorted(unknown)}")
    return ModelParams(arrays), meta


def save_checkpoint(path, params, meta=None):
    atomic_write(path, encode_checkpoint(params, meta))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
