"""Channel attention over 3-D feature maps.

Each channel is summarised by its spatial mean and spatial max. Both
descriptors pass through one shared two-layer MLP (no biases, relu in
between); the two outputs are summed and squashed by a sigmoid into one
weight per channel, which then rescales the input feature map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from volnet import tensor as T
from volnet.errors import ShapeError, StaleCacheError
from volnet.nn import ParamTensor


@dataclass
class AttentionParams:
    w1: ParamTensor  # (C, C // r)
    w2: ParamTensor  # (C // r, C)
    reduction: int

    def __post_init__(self):
        c, hidden = self.w1.value.shape
        if self.reduction < 1 or c % self.reduction or c // self.reduction != hidden:
            raise ShapeError(f"attention over {c} channels cannot use reduction {self.reduction} with hidden width {hidden}")
        if self.w2.value.shape != (hidden, c):
            raise ShapeError(f"w2 shape {self.w2.value.shape} does not match w1 {self.w1.value.shape}")

    @property
    def channels(self) -> int:
        return self.w1.value.shape[0]


@dataclass
class AttentionCache:
    m: np.ndarray
    avg: np.ndarray
    mx: np.ndarray
    argmax: np.ndarray
    h_avg: np.ndarray
    h_max: np.ndarray
    weights: np.ndarray


@dataclass
class AttentionOutput:
    attended: np.ndarray
    weights: np.ndarray
    cache: AttentionCache


def channel_descriptors(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel spatial mean and max, each of shape (N, C)."""
    if m.ndim != 5:
        raise ShapeError(f"feature map must be 5-D (N,C,D,H,W), got {m.ndim}-D")
    flat = m.reshape(m.shape[0], m.shape[1], -1)
    return flat.mean(axis=2), flat.max(axis=2)


def attention_forward(m: np.ndarray, params: AttentionParams) -> AttentionOutput:
    if m.ndim != 5 or m.shape[1] != params.channels:
        raise ShapeError(f"attention expects {params.channels} channels, got input {m.shape}")
    w1, w2 = params.w1.value, params.w2.value
    flat = m.reshape(m.shape[0], m.shape[1], -1)
    avg = flat.mean(axis=2)
    argmax = flat.argmax(axis=2)
    mx = np.take_along_axis(flat, argmax[..., None], axis=2)[..., 0]
    h_avg = avg @ w1
    h_max = mx @ w1
    logits = T.relu(h_avg) @ w2 + T.relu(h_max) @ w2
    weights = T.sigmoid(logits)
    attended = T.channel_scale(m, weights)
    return AttentionOutput(attended, weights, AttentionCache(m, avg, mx, argmax, h_avg, h_max, weights))


def attention_backward(cache: AttentionCache, params: AttentionParams, grad_attended: np.ndarray):
    """Return ``(grad_M, grad_w1, grad_w2)``.

    ``grad_M`` combines the direct product-rule term with the paths through
    both pooled descriptors; the max path routes to the first maximal voxel.
    """
    if grad_attended.shape != cache.m.shape:
        raise StaleCacheError(f"gradient shape {grad_attended.shape} does not match cached input {cache.m.shape}")
    if params.w1.value.shape[0] != cache.m.shape[1]:
        raise StaleCacheError("cache was produced by a different attention module")
    w1, w2 = params.w1.value, params.w2.value
    n, c = cache.m.shape[:2]
    vol = cache.m[0, 0].size

    grad_m, grad_weights = T.channel_scale_backward(cache.m, cache.weights, grad_attended)
    g_logits = grad_weights * cache.weights * (1 - cache.weights)

    r_avg, r_max = T.relu(cache.h_avg), T.relu(cache.h_max)
    grad_w2 = r_avg.T @ g_logits + r_max.T @ g_logits
    g_r = g_logits @ w2.T
    g_h_avg = T.relu_backward(cache.h_avg, g_r)
    g_h_max = T.relu_backward(cache.h_max, g_r)
    grad_w1 = cache.avg.T @ g_h_avg + cache.mx.T @ g_h_max
    g_avg = g_h_avg @ w1.T
    g_max = g_h_max @ w1.T

    grad_m = grad_m + (g_avg / vol)[:, :, None, None, None]
    flat = grad_m.reshape(n, c, -1)
    np.put_along_axis(flat, cache.argmax[..., None], np.take_along_axis(flat, cache.argmax[..., None], axis=2) + g_max[..., None], axis=2)
    return flat.reshape(cache.m.shape), grad_w1, grad_w2
