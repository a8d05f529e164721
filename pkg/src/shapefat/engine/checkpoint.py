"""Binary parameter checkpoints.

Layout (little-endian)::

    b"SFP1" | u32 count | count x (u16 name_len | name utf-8 | u8 rank |
                                   rank x u32 dim | prod(dims) x f32)
"""
import struct

import numpy as np

MAGIC = b"SFP1"


class CheckpointError(ValueError):
    pass


def encode_arrays(arrays):
    """Serialize an ordered ``name -> array`` mapping to bytes."""
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise CheckpointError(f"rank {arr.ndim} too large for {name!r}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_arrays(buf):
    """Inverse of :func:`encode_arrays`; arrays come back as float32."""
    mv = memoryview(buf)
    if bytes(mv[:4]) != MAGIC:
        raise CheckpointError(f"bad magic {bytes(mv[:4])!r}, expected {MAGIC!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(mv):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, mv, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (nlen,) = take("<H")
        if pos + nlen > len(mv):
            raise CheckpointError("truncated checkpoint")
        name = bytes(mv[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(mv):
            raise CheckpointError(f"truncated checkpoint in {name!r}")
        arr = np.frombuffer(mv[pos:pos + nbytes], dtype="<f4").reshape(dims).astype(np.float32)
        pos += nbytes
        if name in out:
            raise CheckpointError(f"duplicate entry {name!r}")
        out[name] = arr
    if pos != len(mv):
        raise CheckpointError(f"{len(mv) - pos} trailing bytes after {count} entries")
    return out


def save_arrays(path, arrays):
    with open(path, "wb") as f:
        f.write(encode_arrays(arrays))


def load_arrays(path):
    with open(path, "rb") as f:
        return decode_arrays(f.read())
