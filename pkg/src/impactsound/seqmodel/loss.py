"""Robust per-timestep regression loss ``rho(r) = log(eps + r**2)``."""
from __future__ import annotations

import numpy as np

DEFAULT_EPSILON = 1.0 / 25 ** 2


def robust_loss(pred, target, epsilon: float = DEFAULT_EPSILON, weights=None):
    """Sum over timesteps of ``w_t * log(eps + ||pred_t - target_t||**2)``.

    ``pred`` and ``target`` share a shape whose last axis is the feature
    axis. Returns the scalar loss and its gradient with respect to ``pred``;
    each timestep's gradient norm is at most ``w_t / sqrt(eps)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    sq = np.einsum("...k,...k->...", diff, diff)
    denom = epsilon + sq
    w = np.ones_like(sq) if weights is None else np.broadcast_to(weights, sq.shape)
    loss = float(np.sum(w * np.log(denom)))
    grad = (2.0 * w / denom)[..., None] * diff
    return loss, grad
