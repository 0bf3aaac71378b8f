"""Versioned little-endian checkpoints of per-unit parameters plus engine config.

Layout::

    magic  b"SKSWCKPT"
    u32    format version
    u32    config byte length, then the UTF-8 ``EngineConfig.to_text()``
    u32    unit count
    per unit:   u32 tensor count
      per tensor: u16 name length, name (UTF-8), u8 dtype code, u8 ndim,
                  u64 per dimension, raw little-endian data

Round trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .topology import EngineConfig

MAGIC = b"SKSWCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


def dumps(params: list[dict], config: EngineConfig) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    text = config.to_text().encode()
    out += [struct.pack("<I", len(text)), text, struct.pack("<I", len(params))]
    for unit in params:
        out.append(struct.pack("<I", len(unit)))
        for name, value in unit.items():
            arr = np.asarray(value)
            code = _CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            raw = name.encode()
            out += [struct.pack("<H", len(raw)), raw, struct.pack("<BB", code, arr.ndim),
                    struct.pack(f"<{arr.ndim}Q", *arr.shape),
                    np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()]
    return b"".join(out)


def loads(blob: bytes) -> tuple[list[dict], EngineConfig]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def unpack(fmt: str):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = unpack("<I")
    config = EngineConfig.from_text(bytes(take(n)).decode())
    (units,) = unpack("<I")
    params = []
    for _ in range(units):
        (count,) = unpack("<I")
        unit = {}
        for _ in range(count):
            (ln,) = unpack("<H")
            name = bytes(take(ln)).decode()
            code, ndim = unpack("<BB")
            if code not in _DTYPES:
                raise CheckpointError(f"unknown dtype code {code}")
            shape = unpack(f"<{ndim}Q")
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            unit[name] = np.frombuffer(take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        params.append(unit)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return params, config


def save_checkpoint(path, params: list[dict], config: EngineConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(params, config))


def load_checkpoint(path) -> tuple[list[dict], EngineConfig]:
    with open(path, "rb") as fh:
        return loads(fh.read())
