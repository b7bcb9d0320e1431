"""3-D Grad-CAM over the four ResNet stages.

The channel weights are spatial means of the target logit's gradient with
respect to a stage's activations. The map is relu of the weighted channel
sum, max-scaled to [0, 1], then trilinearly upsampled to the input grid.
By default the raw trunk activations are used; ``use_attended`` switches to
the attention-scaled tap maps.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from volnet.data.raw import write_raw
from volnet.data.volumes import normalize_volume
from volnet.errors import ConfigError, LabelError, ShapeError
from volnet.model import ForwardTrace, ModelParams, activation_gradients, model_forward


@dataclass
class Heatmap:
    values: np.ndarray  # (D, H, W) in [0, 1]
    stage: int
    target_class: int
    raw_max: float
    attended: bool = False


def _check_stage(stage: int) -> None:
    if stage not in (1, 2, 3, 4):
        raise ConfigError(f"stage must be 1..4, got {stage}")


def stage_activation(trace: ForwardTrace, stage: int, sample: int = 0, use_attended: bool = False) -> np.ndarray:
    """Feature map ``(C, D, H, W)`` of one sample at ``stage``."""
    _check_stage(stage)
    maps = trace.attention[stage - 1].attended if use_attended else trace.stage_outputs[stage - 1]
    return maps[sample]


def gradcam_weights(
    trace: ForwardTrace, params: ModelParams, stage: int, target_class: int, sample: int = 0, use_attended: bool = False
) -> np.ndarray:
    """Per-channel spatial mean of d(logit[sample, target_class]) / d(stage activation)."""
    _check_stage(stage)
    n, k = trace.logits.shape
    if not 0 <= target_class < k:
        raise LabelError(f"target class {target_class} outside [0, {k})")
    if not 0 <= sample < n:
        raise ShapeError(f"sample {sample} outside batch of {n}")
    grad_logits = np.zeros_like(trace.logits)
    grad_logits[sample, target_class] = 1
    if use_attended:
        # attended maps only feed GAP, so the per-voxel gradient is g_gap / V everywhere
        offsets = np.cumsum((0,) + tuple(params.config.stage_channels))
        g_fused = grad_logits @ params["classifier.weight"].value.T
        g_gap = g_fused[sample, offsets[stage - 1] : offsets[stage]]
        voxels = int(np.prod(trace.attention[stage - 1].attended.shape[2:]))
        return g_gap / voxels
    grads = activation_gradients(params, trace, grad_logits)[stage - 1][sample]
    return grads.mean(axis=(1, 2, 3))


def normalize_map(m: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale by the maximum; an all-zero map stays zero. Returns ``(scaled, max)``."""
    mx = float(m.max()) if m.size else 0.0
    if mx > 0:
        return m / mx, mx
    return np.zeros_like(m), mx


def gradcam_map(activations: np.ndarray, alpha: np.ndarray) -> tuple[np.ndarray, float]:
    """``relu(sum_k alpha_k * A_k)`` max-scaled to [0, 1]; also returns the pre-scaling max."""
    if activations.shape[0] != alpha.shape[0]:
        raise ShapeError(f"{alpha.shape[0]} weights for {activations.shape[0]} channels")
    raw = np.maximum(np.tensordot(alpha, activations, axes=1), 0)
    return normalize_map(raw)


def _interp_axis(a: np.ndarray, axis: int, size: int) -> np.ndarray:
    n = a.shape[axis]
    if n == size:
        return a
    if n == 1:
        return np.repeat(a, size, axis=axis)
    pos = np.linspace(0.0, n - 1, size) if size > 1 else np.zeros(1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    t = pos - i0
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i0 + 1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = size
    return lo + t.reshape(shape) * (hi - lo)


def trilinear_upsample(m: np.ndarray, target: tuple[int, int, int]) -> np.ndarray:
    """Align-corners trilinear resampling of a ``(d, h, w)`` map to ``target``."""
    if m.ndim != 3 or len(target) != 3 or min(m.shape) < 1 or min(target) < 1:
        raise ShapeError(f"cannot resample {m.shape} to {target}")
    out = m.astype(np.float64)
    for axis, size in enumerate(target):
        out = _interp_axis(out, axis, int(size))
    # rounding in lo + t * (hi - lo) may overshoot by an ulp
    return np.clip(out, m.min(), m.max()).astype(m.dtype if np.issubdtype(m.dtype, np.floating) else np.float64)


def compute_heatmap(
    params: ModelParams,
    volume: np.ndarray,
    stage: int,
    target_class: int,
    use_attended: bool = False,
    normalize_input: bool = True,
) -> Heatmap:
    """Inference-mode Grad-CAM for one ``(D, H, W)`` volume, at input resolution."""
    _check_stage(stage)
    vol = normalize_volume(volume) if normalize_input else volume
    trace = model_forward(params, vol[None, None], "inference")
    alpha = gradcam_weights(trace, params, stage, target_class, use_attended=use_attended)
    act = stage_activation(trace, stage, use_attended=use_attended)
    coarse, raw_max = gradcam_map(act.astype(np.float64), alpha.astype(np.float64))
    fine, _ = normalize_map(trilinear_upsample(coarse, volume.shape))
    return Heatmap(fine.astype(np.float32), stage, target_class, raw_max, use_attended)


def top_fraction_mask(values: np.ndarray, fraction: float = 0.1) -> np.ndarray:
    """Boolean mask of the ``ceil(fraction * size)`` largest voxels (ties by lower flat index)."""
    flat = values.ravel()
    count = int(np.ceil(fraction * flat.size))
    order = np.argsort(-flat, kind="stable")[:count]
    mask = np.zeros(flat.size, dtype=bool)
    mask[order] = True
    return mask.reshape(values.shape)


def localization_overlap(heatmap: np.ndarray, truth: np.ndarray, fraction: float = 0.1) -> float:
    """Share of the top-``fraction`` heatmap voxels that fall inside ``truth``."""
    top = top_fraction_mask(heatmap, fraction)
    return float((top & truth.astype(bool)).sum() / top.sum())


# --- export ----------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary portable graymap; ``image`` values in [0, 1]."""
    if image.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D image, got {image.shape}")
    pixels = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w = pixels.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def mid_slices(volume: np.ndarray) -> list[np.ndarray]:
    d, h, w = volume.shape
    return [volume[d // 2], volume[:, h // 2, :], volume[:, :, w // 2]]


def overlay(heat: np.ndarray, background: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend white into ``background`` with per-pixel opacity ``alpha * heat``."""
    a = alpha * heat
    return (1 - a) * background + a


def export_heatmap(heatmap: Heatmap, input_volume: np.ndarray, path_prefix) -> list[Path]:
    """Write ``<prefix>.heat.vol``, ``<prefix>_axis{0,1,2}.pgm`` and ``<prefix>_overlay_axis{0,1,2}.pgm``."""
    if heatmap.values.shape != input_volume.shape:
        raise ShapeError(f"heatmap {heatmap.values.shape} and volume {input_volume.shape} differ")
    prefix = Path(path_prefix)
    written = [prefix.with_name(prefix.name + ".heat.vol")]
    write_raw(heatmap.values, written[0])
    lo, hi = float(input_volume.min()), float(input_volume.max())
    background = (input_volume - lo) / (hi - lo) if hi > lo else np.zeros_like(input_volume)
    for axis, (h_slice, b_slice) in enumerate(zip(mid_slices(heatmap.values), mid_slices(background))):
        p = prefix.with_name(f"{prefix.name}_axis{axis}.pgm")
        write_pgm(p, h_slice)
        q = prefix.with_name(f"{prefix.name}_overlay_axis{axis}.pgm")
        write_pgm(q, overlay(h_slice, b_slice))
        written += [p, q]
    return written
