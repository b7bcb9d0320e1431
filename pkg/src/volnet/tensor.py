"""Dense numerical kernels with explicit forward and backward entry points.

Tensors are plain ``numpy.ndarray`` objects in row-major layout. Activation
blocks are 5-D with axes ``(N, C, D, H, W)``. Every kernel works in the dtype
of its inputs, so the same code runs in float32 for training and in float64
for gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from volnet.errors import DegenerateShapeError, ShapeError

_AXES = ("D", "H", "W")


def _triple(value, name: str) -> tuple[int, int, int]:
    if isinstance(value, (int, np.integer)):
        out = (int(value),) * 3
    else:
        out = tuple(int(v) for v in value)
    if len(out) != 3:
        raise ShapeError(f"{name} needs 3 entries, got {len(out)}")
    return out  # type: ignore[return-value]


def _out_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 3-D convolution. Scalars are broadcast to all three axes."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel, "kernel"))
        object.__setattr__(self, "stride", _triple(self.stride, "stride"))
        object.__setattr__(self, "padding", _triple(self.padding, "padding"))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError(
                f"invalid conv geometry kernel={self.kernel} stride={self.stride} padding={self.padding}"
            )

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_spatial(self, spatial: Sequence[int]) -> tuple[int, int, int]:
        out = []
        for axis, size, k, s, p in zip(_AXES, spatial, self.kernel, self.stride, self.padding):
            o = _out_size(size, k, s, p)
            if o < 1:
                raise DegenerateShapeError(
                    f"axis {axis}: input {size} with kernel {k}, stride {s}, padding {p} gives output {o}"
                )
            out.append(o)
        return tuple(out)  # type: ignore[return-value]


def _check_conv_operands(x: np.ndarray, weight: np.ndarray, spec: ConvSpec) -> None:
    if x.ndim != 5:
        raise ShapeError(f"input must be 5-D (N,C,D,H,W), got {x.ndim}-D")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input axis C: got {x.shape[1]}, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        for i, (got, want) in enumerate(zip(weight.shape, spec.weight_shape)):
            if got != want:
                raise ShapeError(f"weight axis {i}: got {got}, spec expects {want}")
        raise ShapeError(f"weight must be 5-D {spec.weight_shape}, got {weight.shape}")


def _patches(x: np.ndarray, kernel, stride, padding, out_spatial, fill=0.0) -> np.ndarray:
    """Strided view of shape (N, C, D', H', W', kd, kh, kw) over the padded input."""
    pd, ph, pw = padding
    if pd or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)), constant_values=fill)
    view = sliding_window_view(x, kernel, axis=(2, 3, 4))
    sd, sh, sw = stride
    od, oh, ow = out_spatial
    return view[:, :, : sd * (od - 1) + 1 : sd, : sh * (oh - 1) + 1 : sh, : sw * (ow - 1) + 1 : sw]


def _im2col(x: np.ndarray, spec: ConvSpec, out_spatial) -> np.ndarray:
    n, c = x.shape[:2]
    view = _patches(x, spec.kernel, spec.stride, spec.padding, out_spatial)
    k = c * int(np.prod(spec.kernel))
    # rows ordered (n, z, y, x); columns ordered (ci, a, b, c) to match weight.reshape(Cout, -1)
    return view.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * int(np.prod(out_spatial)), k)


def conv3d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Zero-padded strided 3-D cross-correlation.

    ``out[n,co,z,y,x] = bias[co] + sum(input[n,ci,z*sd-pd+a, ...] * weight[co,ci,a,b,c])``.
    ``bias`` may be ``None`` for convolutions followed by batch norm.
    """
    _check_conv_operands(x, weight, spec)
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias axis 0: got {bias.shape}, spec expects ({spec.out_channels},)")
    n = x.shape[0]
    out_spatial = spec.output_spatial(x.shape[2:])
    cols = _im2col(x, spec, out_spatial)
    out = cols @ weight.reshape(spec.out_channels, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(n, *out_spatial, spec.out_channels).transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(out)


def conv3d_backward(x: np.ndarray, weight: np.ndarray, spec: ConvSpec, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`conv3d_forward`."""
    _check_conv_operands(x, weight, spec)
    n = x.shape[0]
    out_spatial = spec.output_spatial(x.shape[2:])
    expected = (n, spec.out_channels, *out_spatial)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")

    cout = spec.out_channels
    g = grad_out.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
    cols = _im2col(x, spec, out_spatial)
    w2 = weight.reshape(cout, -1)
    grad_weight = (g.T @ cols).reshape(weight.shape)
    grad_bias = grad_out.sum(axis=(0, 2, 3, 4))

    gcols = (g @ w2).reshape(n, *out_spatial, spec.in_channels, *spec.kernel)
    gcols = gcols.transpose(0, 4, 1, 2, 3, 5, 6, 7)
    pd, ph, pw = spec.padding
    sd, sh, sw = spec.stride
    od, oh, ow = out_spatial
    d, h, w = x.shape[2:]
    gpad = np.zeros((n, spec.in_channels, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=np.result_type(x, weight, grad_out))
    kd, kh, kw = spec.kernel
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                gpad[:, :, a : a + sd * (od - 1) + 1 : sd, b : b + sh * (oh - 1) + 1 : sh, c : c + sw * (ow - 1) + 1 : sw] += gcols[..., a, b, c]
    grad_input = np.ascontiguousarray(gpad[:, :, pd : pd + d, ph : ph + h, pw : pw + w])
    return grad_input, grad_weight, grad_bias


@dataclass(frozen=True)
class MaxPoolIndices:
    """Argmax positions recorded by :func:`maxpool3d`.

    ``flat`` holds, for every output element, the row-major index of the
    selected voxel within its ``(D, H, W)`` input channel.
    """

    flat: np.ndarray
    input_shape: tuple[int, ...]


def maxpool3d(x: np.ndarray, window, stride, padding=0) -> tuple[np.ndarray, MaxPoolIndices]:
    """3-D max pooling. Padded positions never win; ties go to the lowest flat index."""
    if x.ndim != 5:
        raise ShapeError(f"input must be 5-D (N,C,D,H,W), got {x.ndim}-D")
    window = _triple(window, "window")
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if min(window) < 1 or min(stride) < 1 or min(padding) < 0:
        raise ShapeError(f"invalid pool geometry window={window} stride={stride} padding={padding}")
    if any(p >= k for p, k in zip(padding, window)):
        raise ShapeError("padding must be smaller than the window")
    out_spatial = []
    for axis, size, k, s, p in zip(_AXES, x.shape[2:], window, stride, padding):
        o = _out_size(size, k, s, p)
        if o < 1:
            raise DegenerateShapeError(f"axis {axis}: input {size} with window {k}, stride {s} gives output {o}")
        out_spatial.append(o)

    n, c, d, h, w = x.shape
    od, oh, ow = out_spatial
    view = _patches(x, window, stride, padding, out_spatial, fill=-np.inf)
    flat_view = view.reshape(n, c, od, oh, ow, -1)
    k = flat_view.argmax(axis=-1)
    out = np.take_along_axis(flat_view, k[..., None], axis=-1)[..., 0]

    a, b, cc = np.unravel_index(k, window)
    z = np.arange(od).reshape(-1, 1, 1) * stride[0] - padding[0] + a
    y = np.arange(oh).reshape(1, -1, 1) * stride[1] - padding[1] + b
    xx = np.arange(ow).reshape(1, 1, -1) * stride[2] - padding[2] + cc
    flat = (z * h + y) * w + xx
    return np.ascontiguousarray(out), MaxPoolIndices(flat.astype(np.int64), x.shape)


def maxpool3d_backward(indices: MaxPoolIndices, grad_out: np.ndarray) -> np.ndarray:
    """Route each upstream gradient to its argmax position, summing collisions."""
    if grad_out.shape != indices.flat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pooled shape {indices.flat.shape}")
    n, c = indices.input_shape[:2]
    vol = int(np.prod(indices.input_shape[2:]))
    base = (np.arange(n * c, dtype=np.int64) * vol).reshape(n, c, 1, 1, 1)
    summed = np.bincount((indices.flat + base).ravel(), weights=grad_out.ravel(), minlength=n * c * vol)
    return summed.astype(grad_out.dtype, copy=False).reshape(indices.input_shape)


def global_avg_pool3d(x: np.ndarray) -> np.ndarray:
    if x.ndim != 5:
        raise ShapeError(f"input must be 5-D (N,C,D,H,W), got {x.ndim}-D")
    return x.mean(axis=(2, 3, 4))


def global_avg_pool3d_backward(grad_out: np.ndarray, input_shape: Sequence[int]) -> np.ndarray:
    vol = int(np.prod(input_shape[2:]))
    g = grad_out / vol
    return np.ascontiguousarray(np.broadcast_to(g[:, :, None, None, None], tuple(input_shape)))


def _check_scale(x: np.ndarray, weights: np.ndarray) -> None:
    if x.ndim != 5 or weights.shape != x.shape[:2]:
        raise ShapeError(f"channel weights {weights.shape} do not match input (N, C) = {x.shape[:2]}")


def channel_scale(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Multiply every channel of ``x`` by its per-sample weight."""
    _check_scale(x, weights)
    return x * weights[:, :, None, None, None]


def channel_scale_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weights)``."""
    _check_scale(x, weights)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match input {x.shape}")
    grad_x = grad_out * weights[:, :, None, None, None]
    grad_w = (grad_out * x).sum(axis=(2, 3, 4))
    return grad_x, grad_w


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape[1]} vs {b.shape[0]}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, grad_out: np.ndarray):
    if grad_out.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match product {(a.shape[0], b.shape[1])}")
    return grad_out @ b.T, a.T @ grad_out


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a + b


def add_backward(grad_out: np.ndarray):
    return grad_out, grad_out


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a * b


def mul_backward(a: np.ndarray, b: np.ndarray, grad_out: np.ndarray):
    _same_shape(a, b)
    return grad_out * b, grad_out * a


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # gradient at exactly 0 is 0
    _same_shape(x, grad_out)
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
