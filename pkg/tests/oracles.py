"""Independent reference implementations used by the tests.

Everything here is written for clarity, not speed: plain loops over the
definitions, so the fast vectorised code can be checked against them.
"""
from __future__ import annotations

import itertools
import struct

import numpy as np


def naive_conv3d(x, w, b, stride, padding):
    """Seven nested loops over the convolution definition with zero padding."""
    n, cin, d, h, wd = x.shape
    cout, _, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    od = (d + 2 * pd - kd) // sd + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, cout, od, oh, ow))
    for i in range(n):
        for co in range(cout):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        acc = 0.0 if b is None else b[co]
                        for ci in range(cin):
                            for a in range(kd):
                                zi = z * sd - pd + a
                                if not 0 <= zi < d:
                                    continue
                                for bb in range(kh):
                                    yi = y * sh - ph + bb
                                    if not 0 <= yi < h:
                                        continue
                                    for c in range(kw):
                                        xi = xx * sw - pw + c
                                        if 0 <= xi < wd:
                                            acc += x[i, ci, zi, yi, xi] * w[co, ci, a, bb, c]
                        out[i, co, z, y, xx] = acc
    return out


def brute_maxpool(x, window, stride, padding=(0, 0, 0)):
    n, c, d, h, w = x.shape
    out_shape = [(s + 2 * p - k) // st + 1 for s, k, st, p in zip((d, h, w), window, stride, padding)]
    out = np.full((n, c, *out_shape), -np.inf)
    for i, ch in itertools.product(range(n), range(c)):
        for z, y, xx in itertools.product(*(range(s) for s in out_shape)):
            for a, bb, cc in itertools.product(*(range(k) for k in window)):
                zi = z * stride[0] - padding[0] + a
                yi = y * stride[1] - padding[1] + bb
                xi = xx * stride[2] - padding[2] + cc
                if 0 <= zi < d and 0 <= yi < h and 0 <= xi < w:
                    out[i, ch, z, y, xx] = max(out[i, ch, z, y, xx], x[i, ch, zi, yi, xi])
    return out


def pairwise_auc(scores, labels):
    """Fraction of positive/negative pairs ranked correctly, ties counted half."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else (0.5 if p == q else 0.0)
    return wins / (len(pos) * len(neg))


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


# NIfTI-1 field table, written independently of the package from the standard's layout.
NIFTI_LAYOUT = [
    ("sizeof_hdr", 0, "i"), ("dim_info", 39, "b"), ("dim", 40, "8h"), ("intent_p1", 56, "f"),
    ("datatype", 70, "h"), ("bitpix", 72, "h"), ("slice_start", 74, "h"), ("pixdim", 76, "8f"),
    ("vox_offset", 108, "f"), ("scl_slope", 112, "f"), ("scl_inter", 116, "f"),
    ("qform_code", 252, "h"), ("sform_code", 254, "h"), ("srow_x", 280, "4f"),
    ("srow_y", 296, "4f"), ("srow_z", 312, "4f"), ("magic", 344, "4s"),
]


def decode_nifti_header(raw: bytes) -> dict:
    order = "<" if struct.unpack_from("<i", raw, 0)[0] == 348 else ">"
    out = {"byteorder": order}
    for name, offset, fmt in NIFTI_LAYOUT:
        vals = struct.unpack_from(order + fmt, raw, offset)
        out[name] = vals[0] if len(vals) == 1 else vals
    return out
