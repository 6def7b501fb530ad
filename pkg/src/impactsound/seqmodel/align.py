"""Shift alignment between predicted and true feature sequences.

Each target time ``t`` gets a shift label ``L_t`` in ``[-max_shift, max_shift]``
and is compared with prediction ``t + L_t`` (indices clamped to the sequence).
Labels minimise

    sum_t w_t rho(||pred[t + L_t] - target[t]||)
      + sum_t lam * (n_t + n_{t+1}) / 2 * [L_t != L_{t+1}]

where ``n_t`` is the amplitude norm of target ``t`` and
``w_t = 1 + alpha * [n_t >= tau]``. The chain is solved exactly by Viterbi.
"""
from __future__ import annotations

import numpy as np

from .loss import DEFAULT_EPSILON, robust_loss

DEFAULT_MAX_SHIFT = 8
DEFAULT_ALPHA = 3.0
DEFAULT_TAU = 2.2
DEFAULT_POTTS = 1.0


def shift_weights(norms, alpha: float = DEFAULT_ALPHA, tau: float = DEFAULT_TAU) -> np.ndarray:
    norms = np.asarray(norms, dtype=np.float64)
    return 1.0 + alpha * (norms >= tau)


def potts_weights(norms, potts_lambda: float = DEFAULT_POTTS) -> np.ndarray:
    """Penalty for changing label between ``t`` and ``t+1`` (length ``T-1``)."""
    norms = np.asarray(norms, dtype=np.float64)
    return potts_lambda * 0.5 * (norms[:-1] + norms[1:])


def shifted_indices(labels, T: int) -> np.ndarray:
    return np.clip(np.arange(T) + np.asarray(labels, dtype=np.int64), 0, T - 1)


def unary_costs(pred, target, max_shift: int, weights, epsilon: float = DEFAULT_EPSILON):
    """``U[t, j]`` = weighted robust loss of target ``t`` against shift ``j - max_shift``."""
    T = target.shape[0]
    U = np.empty((T, 2 * max_shift + 1))
    t = np.arange(T)
    for j, shift in enumerate(range(-max_shift, max_shift + 1)):
        d = pred[np.clip(t + shift, 0, T - 1)] - target
        U[:, j] = weights * np.log(epsilon + np.einsum("tk,tk->t", d, d))
    return U


def labeling_cost(labels, pred, target, norms=None, *, max_shift: int = DEFAULT_MAX_SHIFT,
                  alpha: float = DEFAULT_ALPHA, tau: float = DEFAULT_TAU,
                  potts_lambda: float = DEFAULT_POTTS, epsilon: float = DEFAULT_EPSILON) -> float:
    """Objective value of one labeling, summed in a fixed order."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    norms = np.linalg.norm(target, axis=1) if norms is None else np.asarray(norms, float)
    U = unary_costs(pred, target, max_shift, shift_weights(norms, alpha, tau), epsilon)
    V = potts_weights(norms, potts_lambda)
    cost = 0.0
    for t in range(len(labels)):
        cost += U[t, labels[t] + max_shift]
        if t + 1 < len(labels) and labels[t] != labels[t + 1]:
            cost += V[t]
    return cost


def align_shifts(pred, target, norms=None, *, max_shift: int = DEFAULT_MAX_SHIFT,
                 alpha: float = DEFAULT_ALPHA, tau: float = DEFAULT_TAU,
                 potts_lambda: float = DEFAULT_POTTS, epsilon: float = DEFAULT_EPSILON):
    """Optimal shift labels by dynamic programming.

    Parameters
    ----------
    pred, target : ndarray of shape (T, K)
    norms : ndarray of shape (T,), optional
        Amplitude norms of the targets used by the weights; defaults to
        ``||target_t||``.

    Returns
    -------
    labels : ndarray of int, shape (T,)
    realigned : ndarray of shape (T, K)
        ``pred[clip(t + labels[t])]``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("pred and target must have the same shape")
    if max_shift < 0:
        raise ValueError("max_shift must be >= 0")
    T = target.shape[0]
    if T == 0:
        return np.zeros(0, dtype=np.int64), pred.copy()
    norms = np.linalg.norm(target, axis=1) if norms is None else np.asarray(norms, float)
    U = unary_costs(pred, target, max_shift, shift_weights(norms, alpha, tau), epsilon)
    V = potts_weights(norms, potts_lambda)
    S = U.shape[1]
    D = U[0].copy()
    back = np.zeros((T, S), dtype=np.int64)
    for t in range(1, T):
        best = int(np.argmin(D))
        switch = D[best] + V[t - 1]
        stay = D < switch
        stay |= D == switch  # ties keep the label, which is also the lowest-cost move
        back[t] = np.where(stay, np.arange(S), best)
        D = np.where(stay, D, switch) + U[t]
    states = np.empty(T, dtype=np.int64)
    states[-1] = int(np.argmin(D))
    for t in range(T - 1, 0, -1):
        states[t - 1] = back[t, states[t]]
    labels = states - max_shift
    return labels, pred[shifted_indices(labels, T)]


def aligned_loss(pred, target, labels, weights=None, epsilon: float = DEFAULT_EPSILON):
    """Robust loss of the realigned prediction and its gradient w.r.t. the
    unshifted ``pred``; contributions of repeated indices accumulate."""
    pred = np.asarray(pred, dtype=np.float64)
    T = pred.shape[0]
    idx = shifted_indices(labels, T)
    loss, g = robust_loss(pred[idx], target, epsilon, weights)
    grad = np.zeros_like(pred)
    np.add.at(grad, idx, g)
    return loss, grad
