"""Waveform generation from sound features.

Two renderers are provided: parametric inversion, which imposes subband
envelopes on filtered white noise, and example-based transfer, which looks up
the L1-nearest training window for each detected impact and overlays the
corresponding recorded clip.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .cochlea import (Cochleagram, Filterbank, _pad, analytic_weights, resample_envelope,
                      subband_envelopes)
from .onset import OnsetList, detect_onsets
from .signal_io import (FEATURE_MAGIC, Waveform, read_matrix, read_waveform, write_matrix,
                        write_waveform)

ENVELOPE_FLOOR = 1e-8
DEFAULT_GAIN = 4.0
DEFAULT_WINDOW_LEN = 8
DEFAULT_WINDOW_OFFSET = 1
DEFAULT_CLIP_SECONDS = 0.5
DEFAULT_FADE_SECONDS = 0.01
DEFAULT_SEARCH_FRAMES = 8


def parametric_invert(coch: Cochleagram, fb: Filterbank, seed: int = 0,
                      threads: int = 1) -> Waveform:
    """Render a waveform whose subband envelopes approximate ``coch``.

    One pass of envelope imposition: every noise subband is flattened by its
    own Hilbert envelope, multiplied by the target envelope (band-limited
    upsampling to the audio rate), filtered again and summed.
    """
    if coch.n_channels != fb.n_channels:
        raise ValueError(f"cochleagram has {coch.n_channels} channels, "
                         f"filterbank has {fb.n_channels}")
    raw = coch.linear_envelopes()
    sr = fb.sample_rate
    n = int(round(coch.n_frames * sr / coch.env_rate))
    if n == 0:
        return Waveform(np.zeros(0), sr)
    noise = np.random.default_rng(seed).standard_normal(n)
    n_fft = sfft.next_fast_len(n + _pad(sr), real=True)
    spec = sfft.rfft(noise, n_fft)
    resp = fb.responses(n_fft)
    weights = analytic_weights(n_fft)

    def channel(i):
        if not np.any(raw[:, i] > 0):
            return None
        full = np.zeros(n_fft, dtype=np.complex128)
        full[: n_fft // 2 + 1] = resp[i] * spec * weights
        z = sfft.ifft(full)[:n]
        carrier = z.real / np.maximum(np.abs(z), ENVELOPE_FLOOR)
        target = resample_envelope(raw[:, i], n)
        return resp[i] * sfft.rfft(carrier * target, n_fft)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(channel, range(fb.n_channels)))
    else:
        parts = [channel(i) for i in range(fb.n_channels)]
    acc = np.zeros(n_fft // 2 + 1, dtype=np.complex128)
    for part in parts:  # fixed summation order keeps threaded runs bit-identical
        if part is not None:
            acc += part
    return Waveform(sfft.irfft(acc, n_fft)[:n], sr)


# ---------------------------------------------------------------- coloring

def _sym_power(cov: np.ndarray, power: float, floor: float):
    evals, evecs = np.linalg.eigh(cov)
    top = max(float(evals.max(initial=0.0)), np.finfo(float).tiny)
    lo = floor * top
    floored = bool(np.any(evals < lo))
    evals = np.maximum(evals, lo)
    return (evecs * evals ** power) @ evecs.T, floored


class ColoringTransform(TransformerMixin, BaseEstimator):
    """Affine map taking the mean/covariance of one sample set onto another's.

    ``fit(X, Y)`` estimates a whitener from the source samples ``X`` and a
    colorer from the target samples ``Y`` (row counts may differ);
    ``transform`` applies ``C_Y^(1/2) C_X^(-1/2) (v - m_X) + m_Y``.

    Parameters
    ----------
    eig_floor : float
        Covariance eigenvalues below ``eig_floor * largest`` are raised to
        that value before taking matrix square roots.
    """

    def __init__(self, eig_floor=1e-10):
        self.eig_floor = eig_floor

    def fit(self, X, Y):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        Y = check_array(Y, dtype=np.float64, ensure_min_samples=2)
        if X.shape[1] != Y.shape[1]:
            raise ValueError("source and target samples differ in dimension")
        for name, Z in (("source", X), ("target", Y)):
            if Z.shape[0] < Z.shape[1] + 1:
                warnings.warn(f"{name} has {Z.shape[0]} samples for dimension {Z.shape[1]}; "
                              "its covariance is rank deficient", RuntimeWarning, stacklevel=2)
        return self._set_moments(X.mean(0), np.atleast_2d(np.cov(X, rowvar=False)),
                                 Y.mean(0), np.atleast_2d(np.cov(Y, rowvar=False)))

    @classmethod
    def from_moments(cls, source_mean, source_cov, target_mean, target_cov, eig_floor=1e-10):
        ct = cls(eig_floor)
        return ct._set_moments(np.atleast_1d(np.asarray(source_mean, float)),
                               np.atleast_2d(np.asarray(source_cov, float)),
                               np.atleast_1d(np.asarray(target_mean, float)),
                               np.atleast_2d(np.asarray(target_cov, float)))

    def _set_moments(self, ms, cs, mt, ct):
        self.source_mean_ = ms
        self.target_mean_ = mt
        self.source_whitener_, f1 = _sym_power(cs, -0.5, self.eig_floor)
        self.target_colorer_, f2 = _sym_power(ct, 0.5, self.eig_floor)
        self.floored_ = f1 or f2
        if self.floored_:
            warnings.warn("covariance eigenvalues were floored", RuntimeWarning, stacklevel=3)
        self.matrix_ = self.target_colorer_ @ self.source_whitener_
        return self

    def transform(self, X):
        check_is_fitted(self, "matrix_")
        X = np.asarray(X, dtype=np.float64)
        return (X - self.source_mean_) @ self.matrix_.T + self.target_mean_


def fit_coloring(predicted, real, predicted_amplitude=None, real_amplitude=None,
                 min_amplitude: float | None = None, eig_floor: float = 1e-10) -> ColoringTransform:
    """Fit a :class:`ColoringTransform` from predicted to real peak features.

    When ``min_amplitude`` is given, rows whose amplitude falls below it are
    dropped from each side first.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if min_amplitude is not None:
        if predicted_amplitude is not None:
            predicted = predicted[np.asarray(predicted_amplitude) >= min_amplitude]
        if real_amplitude is not None:
            real = real[np.asarray(real_amplitude) >= min_amplitude]
    return ColoringTransform(eig_floor).fit(predicted, real)


def apply_coloring(ct: ColoringTransform | None, v) -> np.ndarray:
    if ct is None:
        return np.asarray(v, dtype=np.float64)
    return ct.transform(v)


# -------------------------------------------------------------- exemplars

def feature_window(env: np.ndarray, start: int, length: int) -> np.ndarray:
    """Frames ``[start, start+length)`` of a (T, C) matrix, zero outside, flattened frame-major."""
    T, C = env.shape
    out = np.zeros((length, C))
    idx = np.arange(start, start + length)
    ok = (idx >= 0) & (idx < T)
    out[ok] = env[idx[ok]]
    return out.ravel()


@dataclass(frozen=True)
class ExemplarDatabase:
    """Immutable table of (feature window, waveform clip, labels) entries.

    ``windows`` is ``(M, window_len * n_channels)``. A window starts
    ``offset`` envelope frames before its impact, and so does its clip.
    """

    windows: np.ndarray
    clips: tuple
    labels: tuple
    window_len: int = DEFAULT_WINDOW_LEN
    n_channels: int = 42
    offset: int = DEFAULT_WINDOW_OFFSET
    env_rate: float = 90.0
    _label_index: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.ascontiguousarray(self.windows, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != self.window_len * self.n_channels:
            raise ValueError("windows must be (M, window_len * n_channels)")
        if len(self.clips) != w.shape[0] or len(self.labels) != w.shape[0]:
            raise ValueError("windows, clips and labels differ in length")
        if not np.all(np.isfinite(w)):
            raise ValueError("feature windows must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "windows", w)
        object.__setattr__(self, "clips", tuple(self.clips))
        object.__setattr__(self, "labels", tuple(dict(lab) for lab in self.labels))

    def __len__(self):
        return self.windows.shape[0]

    def candidates(self, label_filter: dict | None = None) -> np.ndarray:
        if not label_filter:
            return np.arange(len(self))
        return np.array([i for i, lab in enumerate(self.labels)
                         if all(lab.get(k) == v for k, v in label_filter.items())], dtype=np.int64)

    def query(self, window, label_filter: dict | None = None) -> tuple[int, float]:
        """Index and L1 distance of the nearest entry; ties go to the lowest index."""
        q = np.asarray(window, dtype=np.float64).reshape(-1)
        if q.size != self.windows.shape[1]:
            raise ValueError(f"query has length {q.size}, database windows {self.windows.shape[1]}")
        pool = self.candidates(label_filter)
        if pool.size == 0:
            raise LookupError(f"no database entries match {label_filter}")
        dist = np.abs(self.windows[pool] - q).sum(axis=1)
        best = int(np.argmin(dist))
        return int(pool[best]), float(dist[best])

    def save(self, directory) -> None:
        """Write ``windows.ftr``, one float32 WAV per clip and ``index.jsonl``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_matrix(d / "windows.ftr", self.windows, self.env_rate, FEATURE_MAGIC)
        lines = []
        for i, (clip, lab) in enumerate(zip(self.clips, self.labels)):
            name = f"clip_{i:05d}.wav"
            write_waveform(d / name, clip)
            lines.append(json.dumps({"clip": name, **lab}, sort_keys=True))
        (d / "index.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        meta = {"window_len": self.window_len, "n_channels": self.n_channels,
                "offset": self.offset, "env_rate": self.env_rate}
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "ExemplarDatabase":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
        windows, _, _ = read_matrix(d / "windows.ftr", FEATURE_MAGIC)
        clips, labels = [], []
        for line in (d / "index.jsonl").read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                clips.append(read_waveform(d / rec.pop("clip")))
                labels.append(rec)
        return cls(windows, tuple(clips), tuple(labels), **meta)


def build_exemplar_db(waves, onsets, fb: Filterbank, labels=None, *,
                      window_len: int = DEFAULT_WINDOW_LEN, offset: int = DEFAULT_WINDOW_OFFSET,
                      clip_seconds: float = DEFAULT_CLIP_SECONDS, env_rate: float = 90.0,
                      compression: float = 0.3, detect: bool = False) -> ExemplarDatabase:
    """One entry per impact in the training recordings.

    Parameters
    ----------
    waves : sequence of Waveform
    onsets : sequence of (sequence of float or None), or None
        Annotated impact times per recording; ``None`` (or ``detect=True``)
        runs :func:`~impactsound.onset.detect_onsets` instead.
    labels : sequence of dict, optional
        Annotations copied onto every entry of that recording.
    """
    waves = list(waves)
    if not waves:
        raise ValueError("cannot build an exemplar database from an empty training set")
    labels = list(labels) if labels is not None else [{} for _ in waves]
    windows, clips, entry_labels = [], [], []
    if onsets is None:
        onsets = [None] * len(waves)
    for wave, times, lab in zip(waves, onsets, labels):
        coch = subband_envelopes(wave, fb, env_rate, compression)
        if detect or times is None:
            times = detect_onsets(wave, env_rate=env_rate).times
        sr = wave.sample_rate
        clip_len = int(round(clip_seconds * sr))
        for t in times:
            peak = int(round(t * env_rate))
            windows.append(feature_window(coch.env, peak - offset, window_len))
            a0 = int(round((peak - offset) / env_rate * sr))
            clip = np.zeros(clip_len)
            idx = np.arange(a0, a0 + clip_len)
            ok = (idx >= 0) & (idx < len(wave))
            clip[ok] = wave.samples[idx[ok]]
            clips.append(Waveform(clip, sr))
            entry_labels.append(dict(lab))
    if not windows:
        raise ValueError("training recordings contain no impacts")
    return ExemplarDatabase(np.array(windows), tuple(clips), tuple(entry_labels), window_len,
                            fb.n_channels, offset, env_rate)


def query_exemplar(db: ExemplarDatabase, query_window, label_filter: dict | None = None):
    """Return ``(clip, distance)`` of the L1-nearest database entry."""
    i, dist = db.query(query_window, label_filter)
    return db.clips[i], dist


def overlay(out: np.ndarray, clip: np.ndarray, start: int, fade: int) -> None:
    """Add ``clip`` into ``out`` at ``start`` with linear fades of ``fade`` samples."""
    clip = np.array(clip, dtype=np.float64)
    if fade > 0 and clip.size:
        ramp = np.linspace(0.0, 1.0, min(fade, clip.size // 2) + 1)[1:]
        clip[: ramp.size] *= ramp
        clip[clip.size - ramp.size:] *= ramp[::-1]
    lo, hi = max(start, 0), min(start + clip.size, out.size)
    if lo < hi:
        out[lo:hi] += clip[lo - start:hi - start]


@dataclass
class TransferResult:
    waveform: Waveform
    inverted: Waveform
    onsets: OnsetList
    matches: list  # (entry index, L1 distance) per onset
    shifts: list = field(default_factory=list)  # frames from detected peak to placed window
    env_rate: float = 90.0

    @property
    def onset_times(self) -> np.ndarray:
        return self.onsets.times

    @property
    def placed_times(self) -> np.ndarray:
        """Peak times the matched clips were aligned to."""
        shifts = np.asarray(self.shifts or [0] * len(self.matches), dtype=np.float64)
        return self.onsets.times + shifts / self.env_rate


def predicted_onsets(pred: Cochleagram, fb: Filterbank, gain: float = DEFAULT_GAIN, seed: int = 0,
                     threads: int = 1, **onset_kw) -> tuple[Waveform, OnsetList]:
    """Invert a predicted cochleagram, amplify by ``gain`` and detect impacts.

    Returns the (unamplified) inversion and the onsets, whose confidences
    are the amplified envelope peaks.
    """
    pred = pred.compressed()
    inverted = parametric_invert(pred, fb, seed, threads)
    loud = Waveform(inverted.samples * gain, inverted.sample_rate)
    return inverted, detect_onsets(loud, env_rate=pred.env_rate, **onset_kw)


def detect_and_transfer(pred: Cochleagram, db: ExemplarDatabase, coloring: ColoringTransform | None,
                        fb: Filterbank, gain: float = DEFAULT_GAIN, seed: int = 0,
                        label_filter: dict | None = None, fade_seconds: float = DEFAULT_FADE_SECONDS,
                        threads: int = 1, search_frames: int = DEFAULT_SEARCH_FRAMES,
                        **onset_kw) -> TransferResult:
    """Example-based rendering of a long predicted cochleagram.

    The prediction is inverted parametrically and amplified by ``gain``;
    each detected impact's window (starting ``db.offset`` frames before the
    peak) is colored, matched to ``db`` by L1 distance, and the matched clip
    is added at the same offset before the peak.

    Peaks found on the re-inverted noise jitter by a few frames, so windows
    starting up to ``search_frames`` frames either side are also queried and
    the overall L1 minimum wins (ties: smallest shift, then lowest entry).
    ``search_frames=0`` queries the detected position only.
    """
    pred = pred.compressed()
    if db.window_len * pred.n_channels != db.windows.shape[1]:
        raise ValueError("prediction channel count does not match the exemplar database")
    inverted, onsets = predicted_onsets(pred, fb, gain, seed, threads, **onset_kw)
    sr = fb.sample_rate
    out = np.zeros(len(inverted))
    if search_frames < 0:
        raise ValueError("search_frames must be >= 0")
    matches, shifts = [], []
    fade = int(round(fade_seconds * sr))
    offsets = sorted(range(-search_frames, search_frames + 1), key=lambda d: (abs(d), d))
    for t in onsets.times:
        peak = int(round(t * pred.env_rate))
        best = None
        for d in offsets:
            window = feature_window(pred.env, peak + d - db.offset, db.window_len)
            idx, dist = db.query(apply_coloring(coloring, window), label_filter)
            if best is None or dist < best[1]:
                best = (idx, dist, d)
        idx, dist, d = best
        matches.append((idx, dist))
        shifts.append(d)
        start = int(round((peak + d - db.offset) / pred.env_rate * sr))
        overlay(out, db.clips[idx].samples, start, fade)
    return TransferResult(Waveform(out, sr), inverted, onsets, matches, shifts, pred.env_rate)
