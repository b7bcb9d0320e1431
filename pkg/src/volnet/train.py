"""Adam, the step-halving learning-rate schedule, the epoch loop and checkpoints.

Checkpoint file layout (all integers little-endian)::

    8 bytes   magic b"VOLNETCK"
    u32       format version
    u32 + n   JSON metadata (model config, training metadata, Adam step/betas)
    u32       record count
    records:  u16 name length, utf-8 name, u8 dtype (1=float32, 2=float64),
              u8 ndim, u32 dims[ndim], u64 payload bytes, little-endian payload

Parameter records come first in namespace order, followed by optional Adam
moments named ``adam.m/<param>`` and ``adam.v/<param>``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from volnet.data.manifest import SplitArrays
from volnet.errors import (
    ArchitectureMismatchError,
    BadMagicError,
    ConfigError,
    EmptySplitError,
    MissingGradientError,
    ShapeConflictError,
    TrainingDivergedError,
    TruncatedFileError,
    VersionMismatchError,
)
from volnet.metrics import EvalReport, evaluate_scores
from volnet.model import ModelConfig, ModelParams, build_model, empty_model, model_backward, model_forward, parameter_layout
from volnet.nn import softmax_cross_entropy

log = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 8
CHECKPOINT_MAGIC = b"VOLNETCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 6
    base_lr: float = 1e-4
    lr_floor: float = 5e-6
    warm_epochs: int = 30
    halve_every: int = 10
    total_epochs: int = 70
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # global-norm clip, 0 disables
    task: str = "AD-vs-NC"
    restore_best: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.lr_floor <= self.base_lr:
            raise ConfigError(f"need 0 < lr_floor <= base_lr, got {self.lr_floor} and {self.base_lr}")
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.warm_epochs < 0 or self.halve_every < 1:
            raise ConfigError("warm_epochs must be >= 0 and halve_every >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam betas must lie in [0, 1) and eps must be positive")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("weight_decay and grad_clip must be >= 0")


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """``base_lr`` through ``warm_epochs``, then halved every ``halve_every`` epochs, never below ``lr_floor``."""
    if not 1 <= epoch <= config.total_epochs:
        raise ConfigError(f"epoch {epoch} outside 1..{config.total_epochs}")
    k = 0 if epoch <= config.warm_epochs else math.ceil((epoch - config.warm_epochs) / config.halve_every)
    return max(config.base_lr * 2.0**-k, config.lr_floor)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "AdamState":
        return cls(config.beta1, config.beta2, config.eps)


def adam_step(params: ModelParams, state: AdamState, lr: float, weight_decay: float = 0.0, grad_clip: float = 0.0) -> None:
    """One bias-corrected Adam update of every trainable tensor; gradients are cleared afterwards."""
    trainable = params.trainable()
    missing = [p.name for p in trainable if p.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for {len(missing)} parameter(s), first: {missing[0]}")
    grads = {p.name: p.grad if not weight_decay else p.grad + weight_decay * p.value for p in trainable}
    if grad_clip:
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        if norm > grad_clip:
            grads = {k: g * (grad_clip / norm) for k, g in grads.items()}

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p in trainable:
        g = grads[p.name]
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    params.zero_grad()


# --- evaluation ------------------------------------------------------------

def predict_proba(params: ModelParams, x: np.ndarray, batch_size: int = EVAL_BATCH_SIZE) -> np.ndarray:
    """Inference-mode class probabilities, shape (N, num_classes)."""
    out = [model_forward(params, x[i : i + batch_size], "inference").probs for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def evaluate(params: ModelParams, split: SplitArrays, threshold: float = 0.5) -> EvalReport:
    if len(split) == 0:
        raise EmptySplitError("cannot evaluate an empty split")
    probs = predict_proba(params, split.x)
    return evaluate_scores(probs[:, 1], split.y, threshold)


# --- training loop ---------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_acc: float | None = None
    val_auc: float | None = None
    val_report: EvalReport | None = None


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = -1.0
    best_state: dict[str, np.ndarray] | None = None
    test_report: EvalReport | None = None
    adam: AdamState | None = None

    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    chunks = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    # a lone trailing sample cannot feed training-mode batch norm at 1-voxel stages
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate(chunks[-2:])
        chunks.pop()
    return chunks


def fit(
    params: ModelParams,
    dataset: Mapping[str, SplitArrays],
    config: TrainConfig,
    callbacks: Sequence[Callable[[EpochRecord, ModelParams], None]] = (),
) -> History:
    """Train on ``dataset["train"]``, validating on ``dataset["val"]`` after every epoch.

    The parameters with the best validation accuracy (earliest on ties) are
    kept in ``History.best_state`` and, with ``restore_best``, loaded back into
    ``params`` at the end. When a ``"test"`` split is present it is evaluated
    with the final parameters.
    """
    train = dataset.get("train")
    if train is None or len(train) == 0:
        raise EmptySplitError("training split is empty")
    val = dataset.get("val")
    if val is not None and len(val) == 0:
        raise EmptySplitError("validation split is empty")

    adam = AdamState.from_config(config)
    history = History(adam=adam)
    for epoch in range(1, config.total_epochs + 1):
        lr = lr_at_epoch(config, epoch)
        rng = np.random.Generator(np.random.Philox(key=np.array([config.seed % 2**64, epoch], dtype=np.uint64)))
        loss_sum = 0.0
        for b, idx in enumerate(_batches(len(train), config.batch_size, rng)):
            trace = model_forward(params, train.x[idx], "training")
            loss, grad, _ = softmax_cross_entropy(trace.logits, train.y[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            model_backward(params, trace, grad)
            adam_step(params, adam, lr, config.weight_decay, config.grad_clip)
            loss_sum += loss * len(idx)
        record = EpochRecord(epoch, lr, loss_sum / len(train))
        if val is not None:
            rep = evaluate(params, val)
            record.val_acc, record.val_auc, record.val_report = rep.acc, rep.auc, rep
            if rep.acc > history.best_val_acc:
                history.best_val_acc, history.best_epoch, history.best_state = rep.acc, epoch, params.state()
        log.info("epoch %d lr %.3g loss %.4f val_acc %s", epoch, lr, record.train_loss, record.val_acc)
        history.records.append(record)
        for cb in callbacks:
            cb(record, params)

    if history.best_state is None:
        history.best_epoch, history.best_state = config.total_epochs, params.state()
    if config.restore_best:
        params.load_state(history.best_state)
    if dataset.get("test") is not None:
        history.test_report = evaluate(params, dataset["test"])
    return history


def _fmt(v) -> str:
    return "nan" if v is None else repr(float(v))


def write_history_csv(history: History, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "lr", "train_loss", "val_acc", "val_auc"))
        for r in history.records:
            w.writerow((r.epoch, _fmt(r.lr), _fmt(r.train_loss), _fmt(r.val_acc), _fmt(r.val_auc)))


# --- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_params(cls, params: ModelParams, adam: AdamState | None = None, **meta) -> "Checkpoint":
        return cls(params.config, params.state(), adam, dict(meta))


_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def _record(name: str, arr: np.ndarray) -> bytes:
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
    raw_name = name.encode("utf-8")
    payload = arr.astype(_CODE_DTYPES[code]).tobytes()
    return b"".join(
        [
            struct.pack("<H", len(raw_name)),
            raw_name,
            struct.pack("<BB", code, arr.ndim),
            struct.pack(f"<{arr.ndim}I", *arr.shape),
            struct.pack("<Q", len(payload)),
            payload,
        ]
    )


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    meta = {"config": checkpoint.config.to_dict(), "meta": checkpoint.meta}
    records = [(n, a) for n, a in checkpoint.tensors.items()]
    if checkpoint.adam is not None:
        a = checkpoint.adam
        meta["adam"] = {"t": a.t, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps}
        records += [(f"adam.m/{n}", m) for n, m in a.m.items()]
        records += [(f"adam.v/{n}", v) for n, v in a.v.items()]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", checkpoint.version, len(blob)), blob, struct.pack("<I", len(records))]
    parts += [_record(n, a) for n, a in records]
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from exc


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.path}: file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    buf = path.read_bytes()
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a volnet checkpoint")
    r = _Reader(buf, path)
    r.take(len(CHECKPOINT_MAGIC))
    version, meta_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedFileError(f"{path}: unreadable metadata ({exc})") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        dims = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        dtype = _CODE_DTYPES.get(code)
        if dtype is None or nbytes != dtype.itemsize * int(np.prod(dims)):
            raise TruncatedFileError(f"{path}: corrupt record {name!r}")
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise TruncatedFileError(f"{path}: {len(buf) - r.pos} trailing bytes")

    adam = None
    if "adam" in meta:
        a = meta["adam"]
        adam = AdamState(a["beta1"], a["beta2"], a["eps"], a["t"])
        for key in list(tensors):
            if key.startswith("adam.m/"):
                adam.m[key[7:]] = tensors.pop(key)
            elif key.startswith("adam.v/"):
                adam.v[key[7:]] = tensors.pop(key)
    return Checkpoint(ModelConfig.from_dict(meta["config"]), tensors, adam, meta.get("meta", {}), version)


def restore_params(checkpoint: Checkpoint, config: ModelConfig | None = None) -> ModelParams:
    """Materialise parameters, checking every stored tensor against ``config``'s layout first."""
    config = config or checkpoint.config
    layout = parameter_layout(config)
    for spec in layout:
        arr = checkpoint.tensors.get(spec.name)
        if arr is None:
            raise ShapeConflictError(f"tensor {spec.name!r} missing from checkpoint")
        if arr.shape != spec.shape:
            raise ShapeConflictError(f"tensor {spec.name!r}: checkpoint shape {arr.shape}, model expects {spec.shape}")
    extra = set(checkpoint.tensors) - {s.name for s in layout}
    if extra:
        raise ShapeConflictError(f"checkpoint has tensors the model lacks, first: {sorted(extra)[0]!r}")
    params = empty_model(config)
    for name, p in params.items():
        p.value[...] = checkpoint.tensors[name]
    return params


def transfer_init(source: Checkpoint, target_config: ModelConfig) -> ModelParams:
    """Initialise a new task's model from a trained one: all weights and BN statistics, no optimizer state."""
    a, b = source.config.architecture(), target_config.architecture()
    diff = [k for k in a if a[k] != b[k]]
    if diff:
        raise ArchitectureMismatchError(
            "architectures differ in " + ", ".join(f"{k} ({a[k]} vs {b[k]})" for k in diff)
        )
    return restore_params(source, target_config)


def train_from_scratch(config: ModelConfig, dataset: Mapping[str, SplitArrays], train_config: TrainConfig, seed: int | None = None):
    """Convenience: build, fit, return ``(params, history)``."""
    params = build_model(config, train_config.seed if seed is None else seed)
    return params, fit(params, dataset, train_config)


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
