"""Binary named-tensor container.

Layout (little-endian)::

    b"CGNN"  u16 version  u32 count
    per entry: u16 name_len, utf-8 name, u8 dtype, u8 rank, u32 dims[rank], raw data

dtype codes: 0 = f32, 1 = f64, 2 = u8 (opaque metadata blobs).
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CGNN"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}
META_PREFIX = "meta/"


class CheckpointError(ValueError):
    pass


def encode_tensors(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a CGNN checkpoint (bad magic)")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos, out = 10, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + n > len(blob):
                raise CheckpointError(f"{name}: truncated data")
            out[name] = np.frombuffer(blob, dtype=dt, count=n // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += n
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save_tensors(path, entries: dict[str, np.ndarray], meta: dict | None = None):
    entries = dict(entries)
    for key, value in (meta or {}).items():
        entries[META_PREFIX + key] = np.frombuffer(json.dumps(value).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(encode_tensors(entries))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        entries = decode_tensors(fh.read())
    meta = {}
    for name in [n for n in entries if n.startswith(META_PREFIX)]:
        meta[name[len(META_PREFIX):]] = json.loads(entries.pop(name).tobytes().decode())
    return entries, meta
