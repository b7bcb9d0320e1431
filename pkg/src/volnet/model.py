"""The attention-tapped 3-D ResNet18 with multi-stage feature fusion.

The main path is a plain ResNet18 trunk. After each of the four stages the
raw feature map is also sent through that stage's channel-attention module
and globally average pooled; the four pooled vectors are concatenated into
one fused vector that feeds the linear classifier. The attention output never
re-enters the trunk.

Parameter namespace (``k`` = kernel size, ``Ci`` = stage widths)::

    stem.conv.weight                    (C1, 1, k, k, k)
    stem.bn.{gamma,beta,running_mean,running_var}
    stage{s}.block{b}.conv1.weight      (Cs, Cin, k, k, k)
    stage{s}.block{b}.bn1.*
    stage{s}.block{b}.conv2.weight      (Cs, Cs, k, k, k)
    stage{s}.block{b}.bn2.*
    stage{s}.block0.shortcut.conv.weight  (Cs, C{s-1}, 1, 1, 1)   stages 2-4
    stage{s}.block0.shortcut.bn.*
    attention{s}.w1                     (Cs, Cs / r)
    attention{s}.w2                     (Cs / r, Cs)
    classifier.weight                   (sum Ci, num_classes)
    classifier.bias                     (num_classes,)
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from volnet import tensor as T
from volnet.attention import AttentionOutput, AttentionParams, attention_backward, attention_forward
from volnet.errors import ConfigError, DegenerateShapeError, InferenceTraceError, ShapeError
from volnet.nn import (
    BatchNormState,
    BlockParams,
    ParamTensor,
    batchnorm3d_backward,
    batchnorm3d_forward,
    he_init,
    linear_backward,
    linear_forward,
    residual_block_backward,
    residual_block_forward,
    softmax,
)

MODES = ("training", "inference")


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: int = 2
    kernel: int = 3
    num_classes: int = 2
    reduction: int = 8
    input_shape: tuple[int, int, int] = (121, 145, 121)
    stem_stride: int = 2
    pool_window: int = 3
    pool_stride: int = 2
    pool_padding: int = 1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if len(self.stage_channels) != 4:
            raise ConfigError(f"expected 4 stage widths, got {len(self.stage_channels)}")
        if min(self.stage_channels) < 1:
            raise ConfigError("stage widths must be >= 1")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be a positive odd size, got {self.kernel}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.reduction < 1 or any(c % self.reduction for c in self.stage_channels):
            raise ConfigError(f"reduction {self.reduction} must divide every stage width {self.stage_channels}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be three positive sizes, got {self.input_shape}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.pool_padding >= self.pool_window:
            raise ConfigError("pool_padding must be smaller than pool_window")

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        kw = dict(stage_channels=(4, 8, 16, 32), reduction=2, input_shape=(32, 32, 32))
        kw.update(overrides)
        return cls(**kw)

    @property
    def fused_width(self) -> int:
        return sum(self.stage_channels)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def architecture(self) -> dict:
        """Fields that determine parameter shapes and wiring."""
        d = asdict(self)
        for key in ("input_shape", "bn_momentum", "bn_eps", "dtype"):
            d.pop(key)
        return d

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    kind: str  # conv | mlp | linear_weight | linear_bias | bn_gamma | bn_beta | bn_mean | bn_var
    fan_in: int = 1

    @property
    def trainable(self) -> bool:
        return self.kind not in ("bn_mean", "bn_var")


def _bn_specs(prefix: str, c: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.gamma", (c,), "bn_gamma"),
        ParamSpec(f"{prefix}.beta", (c,), "bn_beta"),
        ParamSpec(f"{prefix}.running_mean", (c,), "bn_mean"),
        ParamSpec(f"{prefix}.running_var", (c,), "bn_var"),
    ]


def parameter_layout(config: ModelConfig) -> list[ParamSpec]:
    """Ordered list of every tensor the model owns."""
    k = config.kernel
    kk = k**3
    chans = config.stage_channels
    specs = [ParamSpec("stem.conv.weight", (chans[0], 1, k, k, k), "conv", kk)]
    specs += _bn_specs("stem.bn", chans[0])
    c_in = chans[0]
    for s, c in enumerate(chans, start=1):
        for b in range(config.blocks_per_stage):
            p = f"stage{s}.block{b}"
            cin_b = c_in if b == 0 else c
            specs.append(ParamSpec(f"{p}.conv1.weight", (c, cin_b, k, k, k), "conv", cin_b * kk))
            specs += _bn_specs(f"{p}.bn1", c)
            specs.append(ParamSpec(f"{p}.conv2.weight", (c, c, k, k, k), "conv", c * kk))
            specs += _bn_specs(f"{p}.bn2", c)
            if b == 0 and (s > 1 or cin_b != c):
                specs.append(ParamSpec(f"{p}.shortcut.conv.weight", (c, cin_b, 1, 1, 1), "conv", cin_b))
                specs += _bn_specs(f"{p}.shortcut.bn", c)
        c_in = c
    for s, c in enumerate(chans, start=1):
        hidden = c // config.reduction
        specs.append(ParamSpec(f"attention{s}.w1", (c, hidden), "mlp", c))
        specs.append(ParamSpec(f"attention{s}.w2", (hidden, c), "mlp", hidden))
    f = config.fused_width
    specs.append(ParamSpec("classifier.weight", (f, config.num_classes), "linear_weight", f))
    specs.append(ParamSpec("classifier.bias", (config.num_classes,), "linear_bias"))
    return specs


class ModelParams:
    """Ordered ``name -> ParamTensor`` map plus the config that shaped it."""

    def __init__(self, config: ModelConfig, tensors: dict[str, ParamTensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> ParamTensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def values(self):
        return self.tensors.values()

    def items(self):
        return self.tensors.items()

    def trainable(self) -> list[ParamTensor]:
        return [p for p in self.tensors.values() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.zero_grad()

    def num_parameters(self, trainable_only: bool = True) -> int:
        return sum(p.value.size for p in self.tensors.values() if p.trainable or not trainable_only)

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every tensor value."""
        return {name: p.value.copy() for name, p in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.tensors.items():
            p.value[...] = state[name]

    def bn(self, prefix: str, mode: str) -> BatchNormState:
        t = self.tensors
        return BatchNormState(
            t[f"{prefix}.gamma"], t[f"{prefix}.beta"], t[f"{prefix}.running_mean"], t[f"{prefix}.running_var"],
            momentum=self.config.bn_momentum, eps=self.config.bn_eps, mode=mode,
        )

    def block(self, stage: int, index: int, mode: str) -> BlockParams:
        p = f"stage{stage}.block{index}"
        shortcut = f"{p}.shortcut.conv.weight"
        has_sc = shortcut in self.tensors
        return BlockParams(
            self.tensors[f"{p}.conv1.weight"], self.bn(f"{p}.bn1", mode),
            self.tensors[f"{p}.conv2.weight"], self.bn(f"{p}.bn2", mode),
            self.tensors[shortcut] if has_sc else None,
            self.bn(f"{p}.shortcut.bn", mode) if has_sc else None,
        )

    def attention(self, stage: int) -> AttentionParams:
        return AttentionParams(self.tensors[f"attention{stage}.w1"], self.tensors[f"attention{stage}.w2"], self.config.reduction)


def _new_params(config: ModelConfig, fill) -> ModelParams:
    tensors = {}
    for stream, spec in enumerate(parameter_layout(config)):
        tensors[spec.name] = ParamTensor(spec.name, fill(spec, stream), spec.trainable)
    return ModelParams(config, tensors)


def build_model(config: ModelConfig, seed: int) -> ModelParams:
    """He-initialise every weight from ``seed``; tensor ``i`` of the layout uses PRNG stream ``i``."""
    config.validate()
    dtype = config.np_dtype

    def fill(spec: ParamSpec, stream: int) -> np.ndarray:
        if spec.kind in ("conv", "mlp", "linear_weight"):
            return he_init(spec.shape, spec.fan_in, seed, stream, dtype)
        if spec.kind in ("bn_gamma", "bn_var"):
            return np.ones(spec.shape, dtype=dtype)
        return np.zeros(spec.shape, dtype=dtype)

    return _new_params(config, fill)


def empty_model(config: ModelConfig) -> ModelParams:
    """Zero-filled parameters with the right namespace, for loading into."""
    return _new_params(config, lambda spec, _: np.zeros(spec.shape, dtype=config.np_dtype))


def parameter_manifest(params: ModelParams) -> list[tuple[str, tuple[int, ...], bool]]:
    return [(name, p.value.shape, p.trainable) for name, p in params.items()]


def stage_shapes(config: ModelConfig, spatial: Sequence[int]) -> list[tuple[str, tuple[int, int, int]]]:
    """Spatial size after stem conv, stem pool and each stage; raises on the first degenerate one."""
    k = config.kernel
    out = []

    def step(name, size, kernel, stride, pad):
        new = tuple((s + 2 * pad - kernel) // stride + 1 for s in size)
        if min(new) < 1:
            raise DegenerateShapeError(f"{name}: input spatial size {tuple(size)} collapses to {new}")
        out.append((name, new))
        return new

    size = step("stem conv", tuple(spatial), k, config.stem_stride, k // 2)
    size = step("stem pool", size, config.pool_window, config.pool_stride, config.pool_padding)
    for s in range(1, 5):
        if s > 1:
            size = step(f"stage {s}", size, k, 2, k // 2)
        else:
            out.append(("stage 1", size))
    return out


def fuse_features(gaps: Sequence[np.ndarray], widths: Sequence[int] | None = None) -> np.ndarray:
    """Concatenate per-stage pooled vectors in stage order."""
    if widths is not None:
        if len(gaps) != len(widths):
            raise ShapeError(f"expected {len(widths)} stage vectors, got {len(gaps)}")
        for s, (g, w) in enumerate(zip(gaps, widths), start=1):
            if g.shape[1] != w:
                raise ShapeError(f"stage {s} vector width {g.shape[1]} != configured {w}")
    return np.concatenate(list(gaps), axis=1)


@dataclass
class _StemCache:
    x: np.ndarray
    spec: T.ConvSpec
    bn: object
    z: np.ndarray
    pool: T.MaxPoolIndices


@dataclass
class ForwardTrace:
    mode: str
    stage_outputs: list[np.ndarray]
    attention: list[AttentionOutput]
    attended_gaps: list[np.ndarray]
    fused: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    stem_cache: _StemCache = field(repr=False)
    block_caches: list[list] = field(repr=False)

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]


def model_forward(params: ModelParams, x: np.ndarray, mode: str = "inference") -> ForwardTrace:
    """Forward pass over a batch of single-channel volumes ``(N, 1, D, H, W)``."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = params.config
    if x.ndim != 5 or x.shape[1] != 1:
        raise ShapeError(f"input must have shape (N, 1, D, H, W), got {x.shape}")
    stage_shapes(cfg, x.shape[2:])
    x = np.ascontiguousarray(x, dtype=cfg.np_dtype)
    k = cfg.kernel

    stem_spec = T.ConvSpec(1, cfg.stage_channels[0], k, cfg.stem_stride, k // 2)
    h = T.conv3d_forward(x, params["stem.conv.weight"].value, None, stem_spec)
    z, bn_cache = batchnorm3d_forward(h, params.bn("stem.bn", mode))
    h, pool_idx = T.maxpool3d(T.relu(z), cfg.pool_window, cfg.pool_stride, cfg.pool_padding)
    stem_cache = _StemCache(x, stem_spec, bn_cache, z, pool_idx)

    stage_outputs, block_caches = [], []
    for s in range(1, 5):
        caches = []
        for b in range(cfg.blocks_per_stage):
            h, cache = residual_block_forward(h, params.block(s, b, mode), downsample=(s > 1 and b == 0))
            caches.append(cache)
        block_caches.append(caches)
        stage_outputs.append(h)

    attn = [attention_forward(m, params.attention(s)) for s, m in enumerate(stage_outputs, start=1)]
    gaps = [T.global_avg_pool3d(a.attended) for a in attn]
    fused = fuse_features(gaps, cfg.stage_channels)
    logits = linear_forward(fused, params["classifier.weight"].value, params["classifier.bias"].value)
    return ForwardTrace(mode, stage_outputs, attn, gaps, fused, logits, softmax(logits), stem_cache, block_caches)


def _backward(params: ModelParams, trace: ForwardTrace, grad_logits: np.ndarray, detach_taps: bool = False, with_params: bool = True):
    """Shared reverse pass. Returns ``(param_grads, stage_grads)``.

    ``stage_grads[i]`` is the total gradient with respect to the raw output of
    stage ``i + 1``: its own tap plus everything flowing back from later stages.
    """
    cfg = params.config
    if grad_logits.shape != trace.logits.shape:
        raise ShapeError(f"grad_logits shape {grad_logits.shape} != logits shape {trace.logits.shape}")
    grads: dict[str, np.ndarray] = {}
    g_fused, grads["classifier.weight"], grads["classifier.bias"] = linear_backward(
        trace.fused, params["classifier.weight"].value, grad_logits
    )
    offsets = np.cumsum((0,) + cfg.stage_channels)
    stage_grads: list[np.ndarray | None] = [None] * 4
    g_main = None
    for s in range(4, 0, -1):
        out = trace.stage_outputs[s - 1]
        g = np.zeros_like(out) if g_main is None else g_main
        if not detach_taps:
            g_gap = g_fused[:, offsets[s - 1] : offsets[s]]
            g_att = T.global_avg_pool3d_backward(g_gap, out.shape)
            att = params.attention(s)
            g_m, grads[att.w1.name], grads[att.w2.name] = attention_backward(trace.attention[s - 1].cache, att, g_att)
            g = g + g_m
        stage_grads[s - 1] = g
        if s == 1 and not with_params:
            break
        for b in range(cfg.blocks_per_stage - 1, -1, -1):
            block = params.block(s, b, trace.mode)
            g, bgrads = residual_block_backward(trace.block_caches[s - 1][b], block, g)
            grads.update(bgrads)
        g_main = g

    if with_params:
        sc = trace.stem_cache
        g = T.maxpool3d_backward(sc.pool, g_main)
        g = T.relu_backward(sc.z, g)
        g, grads["stem.bn.gamma"], grads["stem.bn.beta"] = batchnorm3d_backward(sc.bn, g)
        _, grads["stem.conv.weight"], _ = T.conv3d_backward(sc.x, params["stem.conv.weight"].value, sc.spec, g)
    return grads, stage_grads


def model_backward(params: ModelParams, trace: ForwardTrace, grad_logits: np.ndarray, detach_taps: bool = False) -> None:
    """Accumulate loss gradients into every trainable parameter.

    ``detach_taps`` blocks the attention-tap gradients from entering the trunk
    (attention weights then receive none either); it exists for diagnostics.
    """
    if trace.mode != "training":
        raise InferenceTraceError("model_backward needs a training-mode trace")
    grads, _ = _backward(params, trace, grad_logits, detach_taps)
    for p in params.trainable():
        g = grads.get(p.name)
        p.accumulate(np.zeros_like(p.value) if g is None else g)


def activation_gradients(params: ModelParams, trace: ForwardTrace, grad_logits: np.ndarray) -> list[np.ndarray]:
    """Gradients of ``sum(grad_logits * logits)`` w.r.t. each raw stage output. Works in either mode."""
    _, stage_grads = _backward(params, trace, grad_logits, with_params=False)
    return stage_grads


def parameter_gradients(params: ModelParams, trace: ForwardTrace, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_logits * logits)`` w.r.t. every trainable tensor, without accumulating.

    Works for inference traces too, where batch norm is the fixed affine map
    given by the running statistics.
    """
    grads, _ = _backward(params, trace, grad_logits)
    return {p.name: grads.get(p.name, np.zeros_like(p.value)) for p in params.trainable()}
