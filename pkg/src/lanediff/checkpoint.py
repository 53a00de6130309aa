"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"I2D1"
    version u32
    seed    i64
    config  u32 length + UTF-8 JSON snapshot
    count   u32 number of arrays, then per array:
        name  u32 length + UTF-8
        dtype u32 length + UTF-8 numpy dtype string (e.g. "<f4")
        ndim  u32, dims u64 each
        data  raw little-endian values

Round trips are bit-identical; wrong magic, truncation, or a version
bump are rejected loudly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"I2D1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _write_bytes(f, b):
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_exact(f, n):
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint file")
    return b


def _read_bytes(f):
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n)


def save_checkpoint(path, arrays: dict, config: dict, seed: int):
    """Write named arrays plus a config snapshot and the master seed."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<q", int(seed)))
        _write_bytes(f, json.dumps(config, sort_keys=True).encode("utf-8"))
        names = sorted(arrays)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(arrays[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            _write_bytes(f, name.encode("utf-8"))
            _write_bytes(f, le.dtype.str.encode("ascii"))
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(le.tobytes())


def load_checkpoint(path):
    """Read back (arrays, config, seed); every guard is explicit."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"format version {version} not supported (expected {FORMAT_VERSION})"
            )
        (seed,) = struct.unpack("<q", _read_exact(f, 8))
        config = json.loads(_read_bytes(f).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        arrays = {}
        for _ in range(count):
            name = _read_bytes(f).decode("utf-8")
            dtype = np.dtype(_read_bytes(f).decode("ascii"))
            (ndim,) = struct.unpack("<I", _read_exact(f, 4))
            shape = tuple(
                struct.unpack("<Q", _read_exact(f, 8))[0] for _ in range(ndim)
            )
            n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(f, n_items * dtype.itemsize)
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise CheckpointError("unexpected trailing bytes in checkpoint")
    return arrays, config, seed
