"""EATTS1 container: named little-endian arrays with a tiny header.

Layout::

    b"EATTS1" | u32 version | repeated records
    record = u32 name_len | name (UTF-8) | u8 dtype | u8 rank | u32 dims[rank] | raw values
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError

MAGIC = b"EATTS1"
VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("<u1"),
    4: np.dtype("<i4"),
}
_CODES = {v: k for k, v in _DTYPES.items()}

CONFIG_KEY = "__config__"


def _dtype_code(arr):
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype} in checkpoint")
    return _CODES[dt]


def dumps(arrays):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(raw)
    return buf.getvalue()


def loads(blob):
    if blob[:6] != MAGIC:
        raise CheckpointError("not an EATTS1 container (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 6)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    pos = 10
    out = {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        code, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for record {name!r}")
        dt = _DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(blob):
            raise CheckpointError(f"truncated record {name!r}")
        out[name] = np.frombuffer(blob, dtype=dt, count=count, offset=pos).reshape(dims).copy()
        pos += nbytes
    return out


def save(path, arrays, config=None):
    arrays = dict(arrays)
    if config is not None:
        arrays[CONFIG_KEY] = np.frombuffer(
            json.dumps(config, sort_keys=True).encode("utf-8"), dtype=np.uint8
        )
    Path(path).write_bytes(dumps(arrays))


def load(path):
    """Return ``(arrays, config)``; ``config`` is None when absent."""
    arrays = loads(Path(path).read_bytes())
    raw = arrays.pop(CONFIG_KEY, None)
    config = json.loads(raw.tobytes().decode("utf-8")) if raw is not None else None
    return arrays, config
