"""Versioned binary container for model parameters.

Layout: magic ``ITCK``, u32 version, u32 header length, a UTF-8 JSON header
(sorted keys, compact) describing kind, hyperparameters and the ordered
array list, then every array as little-endian float64 in C order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ITCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def encode(kind: str, hparams: dict, arrays: dict[str, np.ndarray]) -> bytes:
    header = {
        "kind": kind,
        "hparams": hparams,
        "arrays": [[name, list(a.shape)] for name, a in arrays.items()],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + body


def decode(buf: bytes, source: str = "") -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(buf) < _PREFIX.size:
        raise FormatError(f"{source}: truncated checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad checkpoint magic {magic!r} at byte 0")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt checkpoint header: {exc}") from None
    arrays = {}
    offset = _PREFIX.size + hlen
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        if offset + 8 * n > len(buf):
            raise FormatError(f"{source}: truncated array {name!r} at byte {offset}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(buf):
        raise FormatError(f"{source}: {len(buf) - offset} trailing bytes at byte {offset}")
    return header["kind"], header["hparams"], arrays


def save(path: str | os.PathLike, kind: str, hparams: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(kind, hparams, arrays))


def load(path: str | os.PathLike) -> tuple[str, dict, dict[str, np.ndarray]]:
    path = Path(path)
    return decode(path.read_bytes(), str(path))
