"""SGD with momentum, joint global-norm clipping, and the warmup+cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .config import OptimizerConfig


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Learning rate at an integer step in [0, total_steps].

    Linear warmup from 0 to the peak over warmup_ratio * total_steps steps,
    then cosine decay to exactly 0 at total_steps.
    """
    t = cfg.total_steps
    w = cfg.warmup_ratio * t
    if step <= 0:
        return 0.0
    if step < w:
        return cfg.learning_rate * (step / w)
    if step >= t:
        return 0.0
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (t - w)))


def global_norm(grads: dict) -> float:
    """Joint L2 norm over all gradient tensors, accumulated in float64."""
    total = 0.0
    for key in sorted(grads):
        g = grads[key]
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def clip_by_global_norm(grads: dict, clip_norm: float):
    """Rescale all tensors jointly by min(1, clip_norm / norm); returns (grads, pre_norm)."""
    norm = global_norm(grads)
    if norm > clip_norm and norm > 0.0:
        scale = clip_norm / norm
        grads = {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}
    return grads, norm


def sgd_step(params: dict, grads: dict, velocity: dict, cfg: OptimizerConfig, step: int):
    """One optimizer step over a flat dict of tensors (jointly clipped).

    Returns (new_params, new_velocity, ok). A non-finite gradient rejects the
    whole step: parameters and state are returned unchanged and ok is False.

    Update rule after clipping: v <- momentum * v + g; the applied update is v,
    or g + momentum * v under Nesterov; params <- params - lr_at(step) * update.
    """
    for g in grads.values():
        if not np.isfinite(g).all():
            return params, velocity, False
    grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
    lr = lr_at(step, cfg)
    mom = cfg.momentum
    new_params: dict = {}
    new_velocity: dict = {}
    for key in params:
        g = grads[key]
        v = mom * velocity[key] + g
        update = g + mom * v if cfg.nesterov else v
        new_params[key] = params[key] - np.asarray(lr, dtype=g.dtype) * update
        new_velocity[key] = v
    return new_params, new_velocity, True
