"""Native raw volume container.

Little-endian layout::

    offset  size      field
    0       4         magic  b"VNRV"
    4       4   u32   version (1)
    8       4   u32   ndim
    12      4*ndim u32 dims, slowest axis first
    ...     4*prod     float32 voxels, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from volnet.errors import BadMagicError, TruncatedFileError, VersionMismatchError

MAGIC = b"VNRV"
VERSION = 1


def write_raw(volume: np.ndarray, path) -> None:
    vol = np.asarray(volume)
    head = MAGIC + struct.pack("<II", VERSION, vol.ndim) + struct.pack(f"<{vol.ndim}I", *vol.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(head + vol.astype("<f4").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write raw volume {path}: {exc.strerror}") from exc


def read_raw(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a raw volume container (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, expected {VERSION}")
    end = 12 + 4 * ndim
    if len(raw) < end:
        raise TruncatedFileError(f"{path}: dims truncated")
    dims = struct.unpack_from(f"<{ndim}I", raw, 12)
    count = int(np.prod(dims))
    if len(raw) < end + 4 * count:
        raise TruncatedFileError(f"{path}: expected {4 * count} payload bytes, found {len(raw) - end}")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=end).reshape(dims).astype(np.float32)
