"""Binary checkpoint format.

Layout: the 8-byte magic ``CATCKPT1`` followed, per parameter, by
``u32 name_len | utf-8 name | u32 rank | u32 dims[rank] | f32 data``,
all little-endian. Parameters run to end of file.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CATCKPT1"


class CheckpointError(ValueError):
    pass


def dumps(params):
    """Serialize an ordered ``{name: array}`` mapping."""
    parts = [MAGIC]
    for name, arr in params.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob):
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    out = {}
    pos, end = 8, len(blob)

    def read(n):
        nonlocal pos
        if pos + n > end:
            raise CheckpointError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < end:
        (nlen,) = struct.unpack("<I", read(4))
        name = read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", read(4))
        dims = struct.unpack(f"<{rank}I", read(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(read(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        out[name] = arr
    return out


def save(path, params):
    Path(path).write_bytes(dumps(params))


def load(path):
    return loads(Path(path).read_bytes())


def digest(params, names=None):
    """sha256 over the serialized bytes of the selected parameters."""
    if names is not None:
        params = {k: params[k] for k in names}
    return hashlib.sha256(dumps(params)).hexdigest()
