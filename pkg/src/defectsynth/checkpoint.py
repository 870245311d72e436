"""Binary checkpoint container shared by all trainable components.

Byte layout (little-endian throughout), documented in docs/checkpoint_format.md:

    magic   8 bytes  b"DSYNCKP1"
    version u32      currently 1
    count   u32      number of entries
    entry*  repeated:
        name_len u16
        name     UTF-8 bytes
        dtype    u8   0 = float32, 1 = float64, 2 = int64
        ndim     u8
        dims     u32 * ndim
        payload  raw row-major array bytes

Roundtrip is bit-exact; loading validates magic and version.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"DSYNCKP1"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype not in _DTYPE_TAGS:
            raise ValidationError(f"unsupported checkpoint dtype {a.dtype} for {name!r}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", _DTYPE_TAGS[a.dtype], a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        tag, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(buf[off:off + nbytes], dtype=dtype).reshape(dims).copy()
        off += nbytes
        out[name] = arr
    if off != len(buf):
        raise ValidationError(f"{path}: trailing bytes after last entry")
    return out
