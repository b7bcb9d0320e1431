"""Minimal NIfTI-1 single-file (``.nii``) reader and writer.

Voxels are stored with x fastest. Volumes in volnet are ``(D, H, W)`` arrays
in row-major order, so NIfTI ``dim[1..3]`` map to ``(W, H, D)``. Compressed
``.nii.gz`` files must be decompressed before reading.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from volnet.errors import (
    BadMagicError,
    FormatError,
    PairedFileUnsupportedError,
    TruncatedFileError,
    UnsupportedDatatypeError,
)

HEADER_SIZE = 348
VOX_OFFSET = 352

# (struct format, field name) in on-disk order; 348 bytes in total
HEADER_FIELDS = [
    ("i", "sizeof_hdr"),
    ("10s", "data_type"),
    ("18s", "db_name"),
    ("i", "extents"),
    ("h", "session_error"),
    ("c", "regular"),
    ("B", "dim_info"),
    ("8h", "dim"),
    ("f", "intent_p1"),
    ("f", "intent_p2"),
    ("f", "intent_p3"),
    ("h", "intent_code"),
    ("h", "datatype"),
    ("h", "bitpix"),
    ("h", "slice_start"),
    ("8f", "pixdim"),
    ("f", "vox_offset"),
    ("f", "scl_slope"),
    ("f", "scl_inter"),
    ("h", "slice_end"),
    ("B", "slice_code"),
    ("B", "xyzt_units"),
    ("f", "cal_max"),
    ("f", "cal_min"),
    ("f", "slice_duration"),
    ("f", "toffset"),
    ("i", "glmax"),
    ("i", "glmin"),
    ("80s", "descrip"),
    ("24s", "aux_file"),
    ("h", "qform_code"),
    ("h", "sform_code"),
    ("f", "quatern_b"),
    ("f", "quatern_c"),
    ("f", "quatern_d"),
    ("f", "qoffset_x"),
    ("f", "qoffset_y"),
    ("f", "qoffset_z"),
    ("4f", "srow_x"),
    ("4f", "srow_y"),
    ("4f", "srow_z"),
    ("16s", "intent_name"),
    ("4s", "magic"),
]
_FORMAT = "".join(f for f, _ in HEADER_FIELDS)

DATATYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}


def _decode_header(raw: bytes, order: str) -> dict:
    values = struct.unpack(order + _FORMAT, raw[:HEADER_SIZE])
    header, i = {}, 0
    for fmt, name in HEADER_FIELDS:
        count = int(fmt[:-1]) if fmt[:-1] and fmt[-1] not in "sc" else 1
        if count > 1:
            header[name] = values[i : i + count]
            i += count
        else:
            header[name] = values[i]
            i += 1
    return header


def read_nifti_header(raw: bytes) -> tuple[dict, str]:
    """Decode the header, returning ``(fields, byte_order)`` with order ``'<'`` or ``'>'``."""
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"NIfTI header needs {HEADER_SIZE} bytes, got {len(raw)}")
    if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE:
        order = "<"
    elif struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        order = ">"
    else:
        raise BadMagicError(f"sizeof_hdr is not {HEADER_SIZE} in either byte order")
    header = _decode_header(raw, order)
    magic = header["magic"]
    if magic == b"ni1\x00":
        raise PairedFileUnsupportedError("paired .hdr/.img NIfTI files are not supported")
    if magic != b"n+1\x00":
        raise BadMagicError(f"unexpected NIfTI magic {magic!r}")
    return header, order


def read_nifti_array(path) -> np.ndarray:
    """Voxel array of shape ``(D, H, W)`` with intensity scaling applied."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        header, order = read_nifti_header(raw)
    except FormatError as exc:
        raise type(exc)(f"{path}: {exc}") from None
    code = header["datatype"]
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: NIfTI datatype code {code} is not supported")
    dim = header["dim"]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"{path}: invalid dim[0] = {ndim}")
    extents = [max(int(d), 1) for d in dim[1 : ndim + 1]] + [1] * (7 - ndim)
    if any(e != 1 for e in extents[3:]):
        raise FormatError(f"{path}: only 3-D volumes are supported, dims {extents[:ndim]}")
    w, h, d = extents[:3]
    dtype = np.dtype(DATATYPES[code]).newbyteorder(order)
    offset = int(header["vox_offset"])
    nbytes = w * h * d * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise TruncatedFileError(f"{path}: expected {nbytes} voxel bytes at offset {offset}, file has {len(raw)} bytes")
    data = np.frombuffer(raw, dtype=dtype, count=w * h * d, offset=offset).reshape(d, h, w)
    out_dtype = np.float64 if code == 64 else np.float32
    slope, inter = header["scl_slope"], header["scl_inter"]
    if slope != 0 and not (slope == 1 and inter == 0):
        return (data.astype(np.float64) * slope + inter).astype(out_dtype)
    return data.astype(out_dtype)


def write_nifti(volume: np.ndarray, path, byteorder: str = "<") -> None:
    """Write a float32 ``.nii`` with unit spacing and identity orientation."""
    if byteorder not in ("<", ">"):
        raise ValueError("byteorder must be '<' or '>'")
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {vol.shape}")
    d, h, w = vol.shape
    fields = {
        "sizeof_hdr": HEADER_SIZE,
        "data_type": b"",
        "db_name": b"",
        "extents": 0,
        "session_error": 0,
        "regular": b"r",
        "dim_info": 0,
        "dim": (3, w, h, d, 1, 1, 1, 1),
        "intent_p1": 0.0,
        "intent_p2": 0.0,
        "intent_p3": 0.0,
        "intent_code": 0,
        "datatype": 16,
        "bitpix": 32,
        "slice_start": 0,
        "pixdim": (1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0),
        "vox_offset": float(VOX_OFFSET),
        "scl_slope": 1.0,
        "scl_inter": 0.0,
        "slice_end": 0,
        "slice_code": 0,
        "xyzt_units": 2,
        "cal_max": 0.0,
        "cal_min": 0.0,
        "slice_duration": 0.0,
        "toffset": 0.0,
        "glmax": 0,
        "glmin": 0,
        "descrip": b"volnet",
        "aux_file": b"",
        "qform_code": 0,
        "sform_code": 1,
        "quatern_b": 0.0,
        "quatern_c": 0.0,
        "quatern_d": 0.0,
        "qoffset_x": 0.0,
        "qoffset_y": 0.0,
        "qoffset_z": 0.0,
        "srow_x": (1.0, 0.0, 0.0, 0.0),
        "srow_y": (0.0, 1.0, 0.0, 0.0),
        "srow_z": (0.0, 0.0, 1.0, 0.0),
        "intent_name": b"",
        "magic": b"n+1\x00",
    }
    values = []
    for _, name in HEADER_FIELDS:
        v = fields[name]
        values.extend(v) if isinstance(v, tuple) else values.append(v)
    header = struct.pack(byteorder + _FORMAT, *values)
    payload = vol.astype(np.dtype(np.float32).newbyteorder(byteorder)).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload)
    except OSError as exc:
        raise OSError(f"cannot write NIfTI file {path}: {exc.strerror}") from exc
