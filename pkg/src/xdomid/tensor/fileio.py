"""Binary tensor files.

Layout: magic ``XDT1``, u32 rank, ``rank`` x u64 extents, then the float64
payload in row-major order.  All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"XDT1"


def encode_tensor(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f8")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the end offset."""
    if buf[offset : offset + 4] != MAGIC:
        raise ValueError(f"bad tensor magic at byte {offset}")
    pos = offset + 4
    if len(buf) < pos + 4:
        raise ValueError(f"truncated tensor header at byte {pos}")
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 8 * rank:
        raise ValueError(f"truncated tensor extents at byte {pos}")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    nbytes = 8 * int(np.prod(shape, dtype=np.int64))
    if len(buf) < pos + nbytes:
        raise ValueError(f"truncated tensor payload at byte {pos}: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape)
    return arr.astype(np.float64), pos + nbytes


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    arr, _ = decode_tensor(Path(path).read_bytes())
    return arr
