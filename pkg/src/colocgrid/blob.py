"""``CGIM`` image blobs.

Layout (little-endian): magic ``b"CGIM"``, ``u32`` rank, ``rank`` x ``u32``
dims, then ``prod(dims)`` x ``f32`` voxels. Bytes after the voxel payload are
ignored on decode (the synthetic generator uses them to emulate file-size
spread, the way NIfTI extension blocks pad real files).
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CGIM"


class BlobError(ValueError):
    pass


def encode(volume, padding: int = 0) -> bytes:
    arr = np.ascontiguousarray(volume, dtype="<f4")
    if arr.ndim == 0:
        raise BlobError("volume must have rank >= 1")
    if arr.size == 0:
        raise BlobError("volume has zero voxels")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes() + b"\x00" * padding


def decode_header(blob: bytes) -> tuple[tuple[int, ...], int]:
    """Return ``(dims, payload_offset)``."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise BlobError("not a CGIM blob")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank == 0 or len(blob) < 8 + 4 * rank:
        raise BlobError("truncated CGIM header")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    return tuple(dims), 8 + 4 * rank


def decode(blob: bytes) -> np.ndarray:
    dims, off = decode_header(blob)
    n = int(np.prod(dims, dtype=np.int64))
    if n == 0:
        raise BlobError("CGIM blob has zero voxels")
    if len(blob) < off + 4 * n:
        raise BlobError(f"CGIM payload truncated: need {4 * n} bytes")
    return np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
