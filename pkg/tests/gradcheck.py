"""Finite-difference check of the whole network, shared by the model and acceptance suites."""
from __future__ import annotations

import numpy as np

from volnet.model import ModelConfig, build_model, model_backward, model_forward, parameter_gradients
from volnet.nn import softmax_cross_entropy


def full_model_check(mode: str, batch: int, samples: int = 20, seed: int = 0, h: float = 1e-6) -> dict:
    """Compare analytic and central-difference loss gradients on randomly sampled parameters.

    Uses the tiny widths (4, 8, 16, 32) on 8^3 inputs in float64. In inference
    mode the running statistics are randomised so batch norm is a non-trivial
    affine map; in training mode batch statistics are used.
    """
    cfg = ModelConfig.tiny(input_shape=(8, 8, 8), dtype="float64")
    params = build_model(cfg, seed)
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        if name.endswith("running_mean"):
            p.value[...] = rng.normal(0, 0.1, p.value.shape)
        elif name.endswith("running_var"):
            p.value[...] = rng.uniform(0.5, 1.5, p.value.shape)
        elif ".attention." in name or name.startswith("attention"):
            p.value[...] = rng.normal(0, 0.5, p.value.shape)
    x = rng.standard_normal((batch, 1, 8, 8, 8))
    labels = rng.integers(0, 2, batch)

    def loss() -> float:
        return softmax_cross_entropy(model_forward(params, x, mode).logits, labels)[0]

    trace = model_forward(params, x, mode)
    _, grad_logits, _ = softmax_cross_entropy(trace.logits, labels)
    if mode == "training":
        params.zero_grad()
        model_backward(params, trace, grad_logits)
        analytic = {p.name: p.grad for p in params.trainable()}
    else:
        analytic = parameter_gradients(params, trace, grad_logits)

    tensors = params.trainable()
    picks = []
    for _ in range(samples):
        p = tensors[rng.integers(len(tensors))]
        idx = tuple(int(rng.integers(s)) for s in p.value.shape)
        picks.append((p, idx))

    a, n = [], []
    for p, idx in picks:
        orig = p.value[idx]
        p.value[idx] = orig + h
        fp = loss()
        p.value[idx] = orig - h
        fm = loss()
        p.value[idx] = orig
        a.append(analytic[p.name][idx])
        n.append((fp - fm) / (2 * h))
    a, n = np.array(a), np.array(n)
    rel = float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n)))
    return {"rel_error": rel, "analytic": a, "numeric": n, "names": [p.name for p, _ in picks]}
