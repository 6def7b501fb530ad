"""Subband-envelope (cochleagram) analysis.

A waveform is split by a zero-phase bank of ERB-spaced half-cosine filters
whose squared gains sum to one at every frequency. Each subband's Hilbert
envelope is resampled to the envelope rate and raised to a compression
exponent.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import fft as sfft
from scipy.signal import resample
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .signal_io import Waveform

DEFAULT_SAMPLE_RATE = 21600
DEFAULT_ENV_RATE = 90.0
DEFAULT_COMPRESSION = 0.3
DEFAULT_LOW_HZ = 20.0


def erb_number(freq):
    """Glasberg & Moore (1990) ERB-number of a frequency in Hz."""
    return 21.4 * np.log10(0.00437 * np.asarray(freq, dtype=np.float64) + 1.0)


def erb_to_hz(erb):
    return (10.0 ** (np.asarray(erb, dtype=np.float64) / 21.4) - 1.0) / 0.00437


def erb_space(low_hz: float, high_hz: float, n: int) -> np.ndarray:
    """``n`` frequencies between ``low_hz`` and ``high_hz`` equally spaced in ERB-number."""
    if n < 2:
        raise ValueError("erb_space needs n >= 2")
    if not 0 < low_hz < high_hz:
        raise ValueError(f"need 0 < low_hz < high_hz, got {low_hz}, {high_hz}")
    freqs = erb_to_hz(np.linspace(erb_number(low_hz), erb_number(high_hz), n))
    freqs[0], freqs[-1] = low_hz, high_hz
    return freqs


@dataclass(frozen=True)
class Filterbank:
    """ERB half-cosine filterbank with low- and high-pass completions.

    Channel ``i`` is centred on ``center_freqs[i]``. Channel 0 is a low-pass
    (unit gain below ``low_hz``), the last channel a high-pass (unit gain
    above ``high_hz``), and channels ``1..n_band`` are band-pass bumps that
    span the neighbouring centres, so adjacent squared gains are ``cos**2``
    and ``sin**2`` of the same angle.
    """

    sample_rate: int
    n_band: int = 40
    low_hz: float = DEFAULT_LOW_HZ
    high_hz: float = 0.0
    center_freqs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_band < 1:
            raise ValueError("n_band must be >= 1")
        high = self.high_hz or 0.45 * self.sample_rate
        object.__setattr__(self, "high_hz", float(high))
        if not 0 < self.low_hz < self.high_hz < self.sample_rate / 2:
            raise ValueError(
                f"need 0 < low_hz < high_hz < Nyquist, got {self.low_hz}, {self.high_hz}, "
                f"sample_rate={self.sample_rate}")
        object.__setattr__(self, "center_freqs", erb_space(self.low_hz, self.high_hz, self.n_band + 2))

    @property
    def n_channels(self) -> int:
        return self.n_band + 2

    def gains(self, freqs) -> np.ndarray:
        """Real, nonnegative gains of every channel at ``freqs`` (Hz); shape (C, len(freqs))."""
        e = erb_number(np.abs(np.asarray(freqs, dtype=np.float64)))
        grid = erb_number(self.center_freqs)
        step = grid[1] - grid[0]
        out = np.zeros((self.n_channels, e.size))
        for i, centre in enumerate(grid):
            u = (e - centre) / step
            bump = np.where(np.abs(u) < 1.0, np.cos(0.5 * np.pi * u), 0.0)
            if i == 0:
                bump = np.where(u <= 0.0, 1.0, bump)
            elif i == self.n_channels - 1:
                bump = np.where(u >= 0.0, 1.0, bump)
            out[i] = bump
        return out

    def responses(self, n_fft: int) -> np.ndarray:
        """Gains sampled on the ``rfft`` grid of an ``n_fft``-point transform."""
        return _responses(self.sample_rate, self.n_band, self.low_hz, self.high_hz, n_fft)


@lru_cache(maxsize=32)
def _responses(sample_rate, n_band, low_hz, high_hz, n_fft):
    fb = Filterbank(sample_rate, n_band, low_hz, high_hz)
    resp = fb.gains(np.fft.rfftfreq(n_fft, 1.0 / sample_rate))
    resp.setflags(write=False)
    return resp


def build_filterbank(sample_rate: int, n_band: int = 40, low_hz: float = DEFAULT_LOW_HZ,
                     high_hz: float | None = None) -> Filterbank:
    return Filterbank(int(sample_rate), int(n_band), float(low_hz), float(high_hz or 0.0))


@dataclass(frozen=True)
class Cochleagram:
    """``(T, C)`` matrix of compressed subband envelopes.

    ``sqrt_domain`` marks a matrix holding the square root of the compressed
    envelopes (the domain the regressor predicts in).
    """

    env: np.ndarray
    env_rate: float = DEFAULT_ENV_RATE
    compression: float = DEFAULT_COMPRESSION
    sqrt_domain: bool = False

    def __post_init__(self):
        env = np.asarray(self.env, dtype=np.float64)
        if env.ndim != 2:
            raise ValueError(f"env must be (T, C), got shape {env.shape}")
        if env.shape[1] < 3:
            raise ValueError("a cochleagram needs at least 3 channels")
        if self.env_rate <= 0:
            raise ValueError("env_rate must be positive")
        if env.size and (not np.all(np.isfinite(env)) or env.min() < 0):
            raise ValueError("cochleagram entries must be finite and nonnegative")
        object.__setattr__(self, "env", env)

    @property
    def n_frames(self) -> int:
        return self.env.shape[0]

    @property
    def n_channels(self) -> int:
        return self.env.shape[1]

    @property
    def duration(self) -> float:
        return self.n_frames / self.env_rate

    def compressed(self) -> "Cochleagram":
        if not self.sqrt_domain:
            return self
        return Cochleagram(self.env ** 2, self.env_rate, self.compression, False)

    def to_sqrt(self) -> "Cochleagram":
        if self.sqrt_domain:
            return self
        return Cochleagram(np.sqrt(self.env), self.env_rate, self.compression, True)

    def linear_envelopes(self) -> np.ndarray:
        """Undo the power-law compression (and square root, if any)."""
        return self.compressed().env ** (1.0 / self.compression)


def subbands(wave: Waveform, fb: Filterbank) -> np.ndarray:
    """Zero-phase subband signals, shape (C, n_samples). They sum back to ``wave``
    only in the energy sense: ``sum_n ||y_n||**2 ~= ||w||**2``."""
    n = len(wave)
    n_fft = sfft.next_fast_len(n + _pad(wave.sample_rate), real=True)
    spec = sfft.rfft(wave.samples, n_fft)
    return sfft.irfft(fb.responses(n_fft) * spec, n_fft, axis=-1)[:, :n]


def _pad(sample_rate: int) -> int:
    return sample_rate // 20


def analytic_weights(n_fft: int) -> np.ndarray:
    """Multipliers turning an rfft spectrum into the one-sided analytic spectrum."""
    w = np.full(n_fft // 2 + 1, 2.0)
    w[0] = 1.0
    if n_fft % 2 == 0:
        w[-1] = 1.0
    return w


def hilbert_envelope_from_spectrum(half_spec: np.ndarray, n_fft: int, n: int) -> np.ndarray:
    """``|x + jH(x)|`` for the signal whose rfft is ``half_spec``, truncated to ``n``."""
    full = np.zeros(n_fft, dtype=np.complex128)
    full[: half_spec.shape[-1]] = half_spec * analytic_weights(n_fft)
    return np.abs(sfft.ifft(full))[:n]


def resample_envelope(x: np.ndarray, n_out: int) -> np.ndarray:
    """Band-limited (Fourier) resampling to ``n_out`` points, clipped at zero."""
    if n_out == len(x):
        return np.maximum(x, 0.0)
    if n_out == 0 or len(x) == 0:
        return np.zeros(n_out)
    return np.maximum(resample(x, n_out), 0.0)


def subband_envelopes(wave: Waveform, fb: Filterbank, env_rate: float = DEFAULT_ENV_RATE,
                      compression: float = DEFAULT_COMPRESSION, sqrt_domain: bool = False,
                      threads: int = 1) -> Cochleagram:
    """Compute the cochleagram of ``wave``.

    Per channel: filter in the frequency domain, take the analytic-signal
    magnitude (both in one inverse FFT), resample to ``env_rate``, compress
    with exponent ``compression`` and optionally take the square root.

    Channels are independent, so ``threads > 1`` yields identical output.
    """
    if wave.sample_rate != fb.sample_rate:
        raise ValueError(
            f"waveform rate {wave.sample_rate} Hz does not match filterbank rate {fb.sample_rate} Hz")
    if compression <= 0:
        raise ValueError("compression exponent must be positive")
    n = len(wave)
    n_out = int(round(n * env_rate / wave.sample_rate))
    n_fft = sfft.next_fast_len(n + _pad(wave.sample_rate), real=True)
    spec = sfft.rfft(wave.samples, n_fft)
    resp = fb.responses(n_fft)

    def channel(i):
        env = hilbert_envelope_from_spectrum(resp[i] * spec, n_fft, n)
        return resample_envelope(env, n_out)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            cols = list(pool.map(channel, range(fb.n_channels)))
    else:
        cols = [channel(i) for i in range(fb.n_channels)]
    env = np.stack(cols, axis=1) if cols else np.zeros((n_out, 0))
    env = env ** compression
    if sqrt_domain:
        env = np.sqrt(env)
    return Cochleagram(env, float(env_rate), compression, sqrt_domain)


# ---------------------------------------------------------------------- PCA

@dataclass(frozen=True)
class PcaTransform:
    mean: np.ndarray
    basis: np.ndarray
    explained_variance: np.ndarray
    rank_deficient: bool = False

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.basis.shape[0]


def pca_fit(samples, n_components: int = 10) -> PcaTransform:
    """Top-``n_components`` principal axes of ``samples`` (rows are observations).

    Each axis is signed so its largest-magnitude coordinate is positive. If
    the sample covariance has rank below ``n_components`` the transform is
    still returned, flagged ``rank_deficient``, and a warning is issued.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, dim = X.shape
    if not 1 <= n_components <= dim:
        raise ValueError(f"n_components must lie in [1, {dim}]")
    mean = X.mean(axis=0)
    if n > 1:
        cov = np.cov(X, rowvar=False, ddof=1).reshape(dim, dim)
    else:
        cov = np.zeros((dim, dim))
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_components]
    evals = np.clip(evals[order], 0.0, None)
    basis = evecs[:, order]
    lead = np.argmax(np.abs(basis), axis=0)
    basis = basis * np.sign(basis[lead, np.arange(n_components)])
    tol = max(dim, n) * np.finfo(float).eps * max(evals.max(initial=0.0), 1e-300)
    rank = int(np.sum(evals > tol))
    deficient = rank < n_components
    if deficient:
        warnings.warn(f"sample covariance has rank {rank} < {n_components}; "
                      "trailing components are arbitrary", RuntimeWarning, stacklevel=2)
    return PcaTransform(mean, basis, evals, deficient)


def pca_project(pca: PcaTransform, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != pca.dim:
        raise ValueError(f"expected vectors of length {pca.dim}, got {v.shape[-1]}")
    return (v - pca.mean) @ pca.basis


def pca_invert(pca: PcaTransform, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != pca.n_components:
        raise ValueError(f"expected vectors of length {pca.n_components}, got {z.shape[-1]}")
    return z @ pca.basis.T + pca.mean


# --------------------------------------------------------------- estimators

class CochleagramTransformer(TransformerMixin, BaseEstimator):
    """Turn equal-length waveform clips into flattened cochleagram features.

    ``transform`` maps an ``(n_clips, n_samples)`` array to
    ``(n_clips, T * C)`` features, frame-major, so it can feed any scikit-learn
    classifier in a :class:`~sklearn.pipeline.Pipeline`.
    """

    def __init__(self, sample_rate=DEFAULT_SAMPLE_RATE, n_band=40, low_hz=DEFAULT_LOW_HZ,
                 high_hz=None, env_rate=DEFAULT_ENV_RATE, compression=DEFAULT_COMPRESSION,
                 sqrt_domain=False, threads=1):
        self.sample_rate = sample_rate
        self.n_band = n_band
        self.low_hz = low_hz
        self.high_hz = high_hz
        self.env_rate = env_rate
        self.compression = compression
        self.sqrt_domain = sqrt_domain
        self.threads = threads

    def fit(self, X=None, y=None):
        self.filterbank_ = build_filterbank(self.sample_rate, self.n_band, self.low_hz, self.high_hz)
        self.n_channels_ = self.filterbank_.n_channels
        return self

    def cochleagram(self, samples) -> Cochleagram:
        check_is_fitted(self, "filterbank_")
        return subband_envelopes(Waveform(samples, self.sample_rate), self.filterbank_,
                                 self.env_rate, self.compression, self.sqrt_domain, self.threads)

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        return np.stack([self.cochleagram(row).env.ravel() for row in X])


class SoundPCA(TransformerMixin, BaseEstimator):
    """Thin estimator wrapper around :func:`pca_fit`."""

    def __init__(self, n_components=10):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=1)
        self.pca_ = pca_fit(X, self.n_components)
        self.mean_ = self.pca_.mean
        self.components_ = self.pca_.basis.T
        self.explained_variance_ = self.pca_.explained_variance
        return self

    def transform(self, X):
        check_is_fitted(self, "pca_")
        return pca_project(self.pca_, check_array(X, dtype=np.float64))

    def inverse_transform(self, X):
        check_is_fitted(self, "pca_")
        return pca_invert(self.pca_, check_array(X, dtype=np.float64))
