"""Estimator wrapper: PCA-compressed targets, training, and long-video inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..cochlea import Cochleagram, PcaTransform, pca_fit, pca_invert, pca_project
from ..signal_io import FeatureSequence
from .lstm import LstmNetwork, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

DEFAULT_CHUNK_SECONDS = 10.0
DEFAULT_CHUNK_OVERLAP = 0.3


def _frames(x) -> np.ndarray:
    return x.frames if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)


def _sqrt_env(y) -> np.ndarray:
    if isinstance(y, Cochleagram):
        return y.to_sqrt().env
    return np.asarray(y, dtype=np.float64)


def match_length(y: np.ndarray, T: int) -> np.ndarray:
    """Crop, or extend by repeating the last row, to exactly ``T`` rows."""
    if y.shape[0] >= T:
        return y[:T]
    pad = np.repeat(y[-1:], T - y.shape[0], axis=0)
    return np.concatenate([y, pad], axis=0)


def replicate_features(frames, k: int) -> np.ndarray:
    """Repeat each frame ``k`` times: ``x[k*i + j] = frames[i]``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return np.repeat(np.asarray(_frames(frames), dtype=np.float64), k, axis=0)


def splice_index(a: np.ndarray, b: np.ndarray) -> int:
    """Overlap position where two predictions differ least (sum of squares); earliest on ties."""
    return int(np.argmin(np.sum((a - b) ** 2, axis=1)))


def chunk_starts(n_frames: int, chunk: int, overlap: int) -> list:
    """Start frames of windows of ``chunk`` frames overlapping by ``overlap``."""
    step = max(1, chunk - overlap)
    starts = [0]
    while starts[-1] + chunk < n_frames:
        starts.append(starts[-1] + step)
    return starts


def stitch(chunks: list, starts: list, k: int) -> np.ndarray:
    """Join per-chunk predictions (target time, ``k`` rows per frame).

    In each overlap the output switches from the earlier chunk to the later
    one at :func:`splice_index`.
    """
    out = chunks[0]
    for pred, start in zip(chunks[1:], starts[1:]):
        s0 = k * start
        overlap = out.shape[0] - s0
        if overlap <= 0:
            out = np.concatenate([out, pred])
            continue
        cut = splice_index(out[s0:], pred[:overlap])
        out = np.concatenate([out[:s0 + cut], pred[cut:]])
    return out


class LstmRegressor(BaseEstimator):
    """Recurrent regressor from per-frame visual features to sound features.

    ``fit`` takes video-rate feature sequences and square-root-domain
    cochleagrams (``Cochleagram`` objects or ``(T, C)`` arrays), fits PCA to
    the target frames and trains the LSTM on the projected targets.
    ``predict`` returns square-root-domain ``(k*N, C)`` features.
    """

    def __init__(self, hidden_size=256, n_layers=2, k_replicate=3, replicate_at="last", lag=0,
                 n_components=10, learning_rate=0.01, momentum=0.9, grad_clip_norm=10.0,
                 epochs=10, batch_size=16, epsilon_loss=1.0 / 625, align=False, max_shift=8,
                 shift_alpha=3.0, shift_tau=2.2, potts_lambda=1.0, init_scale=0.08,
                 random_state=0):
        self.hidden_size = hidden_size
        self.n_layers = n_layers
        self.k_replicate = k_replicate
        self.replicate_at = replicate_at
        self.lag = lag
        self.n_components = n_components
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.grad_clip_norm = grad_clip_norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.epsilon_loss = epsilon_loss
        self.align = align
        self.max_shift = max_shift
        self.shift_alpha = shift_alpha
        self.shift_tau = shift_tau
        self.potts_lambda = potts_lambda
        self.init_scale = init_scale
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.momentum, self.grad_clip_norm, self.epochs,
                           self.batch_size, self.epsilon_loss, self.max_shift, self.shift_alpha,
                           self.shift_tau, self.potts_lambda, self.align, int(self.random_state))

    def _prepare(self, X, y):
        xs = [_frames(x) for x in X]
        if not xs:
            raise ValueError("empty training set")
        ys = [match_length(_sqrt_env(t), self.k_replicate * x.shape[0]) for x, t in zip(xs, y)]
        return xs, ys

    def initialize(self, X, y):
        """Fit PCA and draw initial weights without training."""
        xs, ys = self._prepare(X, y)
        self.pca_ = pca_fit(np.concatenate(ys), self.n_components)
        self.net_ = LstmNetwork.initialize(
            xs[0].shape[1], self.hidden_size, self.n_layers, self.pca_.n_components,
            self.k_replicate, self.replicate_at, self.lag, self.init_scale,
            np.random.default_rng(self.random_state))
        self.n_features_in_ = xs[0].shape[1]
        return xs, ys

    def fit(self, X, y):
        xs, ys = self.initialize(X, y)
        targets = [pca_project(self.pca_, t) for t in ys]
        norms = [np.linalg.norm(t, axis=1) for t in ys]
        self.loss_curve_ = train(self.net_, xs, targets, self.train_config(), norms)
        return self

    def forward(self, x) -> tuple[np.ndarray, np.ndarray]:
        """PCA-space outputs ``(k*N, K)`` and their ``(k*N, C)`` reconstruction."""
        check_is_fitted(self, "net_")
        z = self.net_.predict(_frames(x))
        return z, pca_invert(self.pca_, z)

    def predict(self, X) -> list:
        return [self.forward(x)[1] for x in X]

    def predict_long(self, x, frame_rate: float | None = None, env_rate: float = 90.0,
                     chunk_seconds: float = DEFAULT_CHUNK_SECONDS,
                     overlap: float = DEFAULT_CHUNK_OVERLAP) -> Cochleagram:
        """Predict a cochleagram for an arbitrarily long feature sequence.

        The sequence is processed in ``chunk_seconds`` windows overlapping
        by the fraction ``overlap`` and stitched with :func:`stitch`; the
        result is returned in the compressed (non-square-root) domain.
        """
        check_is_fitted(self, "net_")
        frames = _frames(x)
        if frame_rate is None:
            frame_rate = x.frame_rate if isinstance(x, FeatureSequence) else 30.0
        chunk = max(1, int(round(chunk_seconds * frame_rate)))
        starts = chunk_starts(frames.shape[0], chunk, int(round(overlap * chunk)))
        preds = [self.net_.predict(frames[s:s + chunk]) for s in starts]
        z = stitch(preds, starts, self.net_.k_replicate)
        sq = np.maximum(pca_invert(self.pca_, z), 0.0)
        return Cochleagram(sq ** 2, env_rate, sqrt_domain=False)

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        save_checkpoint(path, self.net_, self.pca_)

    @classmethod
    def load(cls, path) -> "LstmRegressor":
        net, pca = load_checkpoint(path)
        replicate_at = "last" if net.replicate_before == len(net.layers) - 1 else "input"
        model = cls(hidden_size=net.hidden, n_layers=len(net.layers), k_replicate=net.k_replicate,
                    replicate_at=replicate_at, lag=net.lag, n_components=pca.n_components)
        model.net_, model.pca_ = net, pca
        model.n_features_in_ = net.input_dim
        return model


def pca_invert_backward(pca: PcaTransform, grad_features: np.ndarray) -> np.ndarray:
    """Chain rule through :func:`pca_invert`: gradient w.r.t. the PCA coordinates."""
    return np.asarray(grad_features) @ pca.basis
