"""Mini-batch SGD with momentum and global-norm clipping for :class:`LstmNetwork`."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .align import (DEFAULT_ALPHA, DEFAULT_MAX_SHIFT, DEFAULT_POTTS, DEFAULT_TAU, aligned_loss,
                    align_shifts, shift_weights)
from .loss import DEFAULT_EPSILON, robust_loss

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    grad_clip_norm: float = 10.0
    epochs: int = 10
    batch_size: int = 16
    epsilon_loss: float = DEFAULT_EPSILON
    max_shift: int = DEFAULT_MAX_SHIFT
    shift_alpha: float = DEFAULT_ALPHA
    shift_tau: float = DEFAULT_TAU
    potts_lambda: float = DEFAULT_POTTS
    align: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be >= 0 and momentum in [0, 1)")
        if self.grad_clip_norm <= 0 or self.epsilon_loss <= 0:
            raise ValueError("grad_clip_norm and epsilon_loss must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.max_shift < 0:
            raise ValueError("invalid epochs, batch_size or max_shift")


def clip_by_global_norm(grads: list, max_norm: float):
    """Scale all gradients by one factor so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(np.vdot(g, g) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def batch_objective(net, X, targets, config: TrainConfig, norms=None):
    """Mean per-sequence loss of one batch and its parameter gradients.

    ``targets`` is (B, T, K) in target time. With ``net.lag = L`` the outputs
    ``L..T-1`` are compared with targets ``0..T-L-1``; the last ``L`` targets
    are not supervised. With ``config.align`` each sequence is first realigned
    by :func:`align_shifts` and the weighted loss is backpropagated to the
    shifted positions.
    """
    B = X.shape[0]
    Y, cache = net.forward(X)
    lag = net.lag
    T = Y.shape[1]
    pred = Y[:, lag:]
    tgt = targets[:, :T - lag]
    dY = np.zeros_like(Y)
    if config.align:
        total = 0.0
        for b in range(B):
            nb = np.linalg.norm(tgt[b], axis=1) if norms is None else norms[b][:T - lag]
            labels, _ = align_shifts(pred[b], tgt[b], nb, max_shift=config.max_shift,
                                     alpha=config.shift_alpha, tau=config.shift_tau,
                                     potts_lambda=config.potts_lambda, epsilon=config.epsilon_loss)
            loss_b, g = aligned_loss(pred[b], tgt[b], labels,
                                     shift_weights(nb, config.shift_alpha, config.shift_tau),
                                     config.epsilon_loss)
            total += loss_b
            dY[b, lag:] = g
        loss = total
    else:
        loss, g = robust_loss(pred, tgt, config.epsilon_loss)
        dY[:, lag:] = g
    grads = net.backward(dY / B, cache)
    return loss / B, grads, T - lag


def _batches(lengths, batch_size, rng):
    buckets = defaultdict(list)
    for i in rng.permutation(len(lengths)):
        buckets[lengths[i]].append(int(i))
    batches = []
    for key in sorted(buckets):
        idx = buckets[key]
        batches += [idx[s:s + batch_size] for s in range(0, len(idx), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(net, inputs, targets, config: TrainConfig, norms=None, callback=None) -> list:
    """Fit ``net`` in place.

    Parameters
    ----------
    inputs : list of ndarray (N_i, D)
        Video-rate feature sequences.
    targets : list of ndarray (k * N_i, K)
        Targets in the network's output space.
    norms : list of ndarray (k * N_i,), optional
        Target amplitude norms for alignment weights.

    Returns
    -------
    list of float
        Mean per-timestep loss of each epoch.
    """
    if len(inputs) != len(targets) or not inputs:
        raise ValueError("need equally many (non-zero) inputs and targets")
    for x, y in zip(inputs, targets):
        if y.shape[0] != net.k_replicate * x.shape[0]:
            raise ValueError("each target must have k_replicate times as many frames as its input")
    rng = np.random.default_rng(config.seed)
    theta = net.get_flat()
    velocity = np.zeros_like(theta)
    curve = []
    for epoch in range(config.epochs):
        total, steps = 0.0, 0
        for idx in _batches([x.shape[0] for x in inputs], config.batch_size, rng):
            X = np.stack([inputs[i] for i in idx])
            Y = np.stack([targets[i] for i in idx])
            nb = None if norms is None else [norms[i] for i in idx]
            loss, grads, n_t = batch_objective(net, X, Y, config, nb)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}; "
                                       f"lower the learning rate (now {config.learning_rate})")
            grads, _ = clip_by_global_norm(grads, config.grad_clip_norm)
            flat = np.concatenate([g.ravel() for g in grads])
            velocity = config.momentum * velocity - config.learning_rate * flat
            theta = theta + velocity
            net.set_flat(theta)
            total += loss * len(idx)
            steps += n_t * len(idx)
        curve.append(total / max(steps, 1))
        log.info("epoch %d loss %.5f", epoch + 1, curve[-1])
        if callback is not None:
            callback(epoch, curve[-1])
    return curve


def window_sequences(features: np.ndarray, targets: np.ndarray, k: int, frame_rate: float,
                     seconds: float = 2.0, stride: float = 0.5):
    """Cut a long recording into fixed-length training windows.

    Returns lists of video-rate inputs and matching ``k``-times longer targets.
    """
    n = int(round(seconds * frame_rate))
    step = max(1, int(round(stride * frame_rate)))
    xs, ys = [], []
    for s in range(0, features.shape[0] - n + 1, step):
        xs.append(features[s:s + n])
        ys.append(targets[k * s:k * (s + n)])
    return xs, ys
