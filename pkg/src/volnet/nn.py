"""Trainable layers with hand-written backward passes.

Backward functions are pure: they return gradients keyed by parameter name
and leave accumulation to the caller (see :meth:`ParamTensor.accumulate`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from volnet import tensor as T
from volnet.errors import InsufficientBatchError, LabelError, ShapeError


class ParamTensor:
    """A named tensor with an optional accumulated gradient.

    ``grad is None`` means "no gradient yet" and is the zeroed state between
    optimizer steps. Non-trainable entries (batch-norm running statistics)
    share the same container so checkpoints see one flat namespace.
    """

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.value = value
        self.grad: np.ndarray | None = None
        self.trainable = trainable

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ShapeError(f"{self.name}: gradient shape {g.shape} != value shape {self.value.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


# --- seeded initialisation -------------------------------------------------

def standard_normal(count: int, seed: int, stream: int = 0) -> np.ndarray:
    """Portable standard-normal samples.

    Algorithm: Philox4x64-10 with 128-bit key ``(seed, stream)`` and counter
    starting at zero yields raw 64-bit words. Each word ``r`` becomes a
    uniform ``u = (r >> 11) * 2**-53``; consecutive pairs ``(u1, u2)`` go
    through Box-Muller, ``sqrt(-2 ln(1 - u1)) * (cos, sin)(2 pi u2)``.
    """
    key = np.array([seed % 2**64, stream % 2**64], dtype=np.uint64)
    bitgen = np.random.Philox(key=key)
    pairs = (count + 1) // 2
    raw = bitgen.random_raw(2 * pairs)
    u = (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53
    u1, u2 = u[0::2], u[1::2]
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = radius * np.cos(2.0 * np.pi * u2)
    out[1::2] = radius * np.sin(2.0 * np.pi * u2)
    return out[:count]


def he_init(shape: Sequence[int], fan_in: int, seed: int, stream: int = 0, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal with standard deviation ``sqrt(2 / fan_in)``."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    count = int(np.prod(shape))
    z = standard_normal(count, seed, stream) * math.sqrt(2.0 / fan_in)
    return z.reshape(tuple(shape)).astype(dtype)


# --- batch normalisation ---------------------------------------------------

@dataclass
class BatchNormState:
    gamma: ParamTensor
    beta: ParamTensor
    running_mean: ParamTensor
    running_var: ParamTensor
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "training"

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if self.mode not in ("training", "inference"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str


_BN_AXES = (0, 2, 3, 4)


def _bcast(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None, None]


def batchnorm3d_forward(x: np.ndarray, state: BatchNormState) -> tuple[np.ndarray, BatchNormCache]:
    """Per-channel normalisation over (N, D, H, W).

    In training mode the running statistics are updated in place; the running
    variance tracks the unbiased batch variance.
    """
    if x.ndim != 5 or x.shape[1] != state.gamma.value.shape[0]:
        raise ShapeError(f"batch norm over {state.gamma.value.shape[0]} channels got input {x.shape}")
    gamma = state.gamma.value
    if state.mode == "training":
        m = x.size // x.shape[1]
        if m < 2:
            raise InsufficientBatchError(
                f"{state.gamma.name}: training-mode batch norm needs N*D*H*W >= 2, got {m}"
            )
        mean = x.mean(axis=_BN_AXES)
        var = x.var(axis=_BN_AXES)
        rm, rv = state.running_mean.value, state.running_var.value
        mom = state.momentum
        rm[...] = (1 - mom) * rm + mom * mean
        rv[...] = (1 - mom) * rv + mom * var * (m / (m - 1))
    else:
        mean = state.running_mean.value
        var = state.running_var.value
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x - _bcast(mean.astype(x.dtype))) * _bcast(inv_std)
    out = xhat * _bcast(gamma) + _bcast(state.beta.value)
    return out, BatchNormCache(xhat, inv_std, gamma, state.mode)


def batchnorm3d_backward(cache: BatchNormCache, grad_out: np.ndarray):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    if grad_out.shape != cache.xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match cached {cache.xhat.shape}")
    grad_beta = grad_out.sum(axis=_BN_AXES)
    grad_gamma = (grad_out * cache.xhat).sum(axis=_BN_AXES)
    dxhat = grad_out * _bcast(cache.gamma)
    if cache.mode == "inference":
        return dxhat * _bcast(cache.inv_std), grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[1]
    sum_dxhat = dxhat.sum(axis=_BN_AXES)
    sum_dxhat_xhat = (dxhat * cache.xhat).sum(axis=_BN_AXES)
    grad_x = (dxhat - _bcast(sum_dxhat / m) - cache.xhat * _bcast(sum_dxhat_xhat / m)) * _bcast(cache.inv_std)
    return grad_x, grad_gamma, grad_beta


# --- dense layers and loss -------------------------------------------------

def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight output width {weight.shape[1]}")
    return T.matmul(x, weight) + bias


def linear_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    grad_x, grad_w = T.matmul_backward(x, weight, grad_out)
    return grad_x, grad_w, grad_out.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over the batch.

    Returns ``(loss, grad_logits, probs)`` with ``grad_logits = (probs - onehot) / N``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    probs = np.exp(log_probs)
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad, probs


# --- residual basic block --------------------------------------------------

@dataclass
class BlockParams:
    """Parameters of one basic block. ``shortcut_*`` are ``None`` for identity shortcuts."""

    conv1: ParamTensor
    bn1: BatchNormState
    conv2: ParamTensor
    bn2: BatchNormState
    shortcut_conv: ParamTensor | None = None
    shortcut_bn: BatchNormState | None = None

    @property
    def in_channels(self) -> int:
        return self.conv1.value.shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv1.value.shape[0]

    @property
    def kernel(self) -> tuple[int, ...]:
        return self.conv1.value.shape[2:]


@dataclass
class BlockCache:
    x: np.ndarray
    specs: tuple[T.ConvSpec, T.ConvSpec, T.ConvSpec | None]
    bn1: BatchNormCache
    a1: np.ndarray
    z1: np.ndarray
    bn2: BatchNormCache
    sc_bn: BatchNormCache | None
    pre: np.ndarray


def _block_specs(block: BlockParams, downsample: bool):
    stride = 2 if downsample else 1
    k = block.kernel
    pad = tuple(s // 2 for s in k)
    c_in, c_out = block.in_channels, block.out_channels
    s1 = T.ConvSpec(c_in, c_out, k, stride, pad)
    s2 = T.ConvSpec(c_out, c_out, k, 1, pad)
    needs_projection = downsample or c_in != c_out
    if needs_projection != (block.shortcut_conv is not None):
        raise ShapeError(
            f"{block.conv1.name}: shortcut projection {'required' if needs_projection else 'not allowed'} "
            f"for {c_in}->{c_out} channels, downsample={downsample}"
        )
    sc = T.ConvSpec(c_in, c_out, 1, stride, 0) if needs_projection else None
    return s1, s2, sc


def residual_block_forward(x: np.ndarray, block: BlockParams, downsample: bool) -> tuple[np.ndarray, BlockCache]:
    """``relu(BN(conv(relu(BN(conv(x))))) + shortcut(x))``."""
    s1, s2, sc = _block_specs(block, downsample)
    h1 = T.conv3d_forward(x, block.conv1.value, None, s1)
    z1, c_bn1 = batchnorm3d_forward(h1, block.bn1)
    a1 = T.relu(z1)
    h2 = T.conv3d_forward(a1, block.conv2.value, None, s2)
    z2, c_bn2 = batchnorm3d_forward(h2, block.bn2)
    c_sc = None
    if sc is not None:
        hs = T.conv3d_forward(x, block.shortcut_conv.value, None, sc)
        shortcut, c_sc = batchnorm3d_forward(hs, block.shortcut_bn)
    else:
        shortcut = x
    pre = T.add(z2, shortcut)
    return T.relu(pre), BlockCache(x, (s1, s2, sc), c_bn1, a1, z1, c_bn2, c_sc, pre)


def residual_block_backward(cache: BlockCache, block: BlockParams, grad_out: np.ndarray):
    """Return ``(grad_input, grads)`` where ``grads`` maps parameter names to gradients."""
    s1, s2, sc = cache.specs
    grads: dict[str, np.ndarray] = {}
    g_pre = T.relu_backward(cache.pre, grad_out)

    g_h2, grads[block.bn2.gamma.name], grads[block.bn2.beta.name] = batchnorm3d_backward(cache.bn2, g_pre)
    g_a1, grads[block.conv2.name], _ = T.conv3d_backward(cache.a1, block.conv2.value, s2, g_h2)
    g_z1 = T.relu_backward(cache.z1, g_a1)
    g_h1, grads[block.bn1.gamma.name], grads[block.bn1.beta.name] = batchnorm3d_backward(cache.bn1, g_z1)
    g_x, grads[block.conv1.name], _ = T.conv3d_backward(cache.x, block.conv1.value, s1, g_h1)

    if sc is not None:
        bn = block.shortcut_bn
        g_hs, grads[bn.gamma.name], grads[bn.beta.name] = batchnorm3d_backward(cache.sc_bn, g_pre)
        g_sx, grads[block.shortcut_conv.name], _ = T.conv3d_backward(cache.x, block.shortcut_conv.value, sc, g_hs)
        g_x = g_x + g_sx
    else:
        g_x = g_x + g_pre
    return g_x, grads
