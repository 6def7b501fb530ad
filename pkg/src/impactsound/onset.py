"""Impact onset detection and clip extraction.

Candidates are envelope samples that rise steeply above the median of the
few preceding samples (one preceding sample gives the plain forward
difference). Each candidate
climbs to the nearest mode of a Gaussian kernel density in which envelope
amplitude is the weight of each time sample (mean shift), coincident modes
collapse, and greedy non-maximal suppression keeps onsets ``min_sep`` apart.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal_io import FeatureSequence, Waveform

DEFAULT_ENV_RATE = 90.0
DEFAULT_MIN_SEP = 0.25
DEFAULT_BANDWIDTH = 0.05
DEFAULT_THRESHOLD_FACTOR = 9.0
DEFAULT_BASELINE_FRAMES = 5


@dataclass(frozen=True)
class OnsetList:
    times: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "confidences",
                           np.asarray(self.confidences, dtype=np.float64).reshape(-1))
        if self.times.shape != self.confidences.shape:
            raise ValueError("times and confidences differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("onset times must be strictly ascending")

    def __len__(self):
        return len(self.times)

    def to_records(self) -> list[dict]:
        return [{"time": float(t), "confidence": float(c)}
                for t, c in zip(self.times, self.confidences)]


def amplitude_envelope(wave: Waveform, env_rate: float = DEFAULT_ENV_RATE) -> np.ndarray:
    """Peak absolute amplitude in frames of ``1/env_rate`` seconds.

    Frame ``t`` is centred on time ``t / env_rate`` (matching cochleagram
    sample times) and covers ``[(t - 1/2) / env_rate, (t + 1/2) / env_rate)``.
    """
    n = len(wave)
    n_frames = int(round(n * env_rate / wave.sample_rate))
    if n_frames == 0:
        return np.zeros(0)
    edges = np.ceil((np.arange(n_frames) - 0.5) * wave.sample_rate / env_rate).astype(np.int64)
    starts = np.clip(edges, 0, n - 1)
    return np.maximum.reduceat(np.abs(wave.samples), starts)


def default_threshold(envelope: np.ndarray, factor: float = DEFAULT_THRESHOLD_FACTOR) -> float:
    """``factor`` times the median absolute forward difference of the envelope."""
    if len(envelope) < 2:
        return 0.0
    return float(factor * np.median(np.abs(np.diff(envelope))))


def gradient_candidates(envelope: np.ndarray, threshold: float,
                        baseline_frames: int = 1) -> np.ndarray:
    """Indices ``t >= 1`` where ``envelope[t]`` exceeds the median of the
    preceding ``baseline_frames`` samples (fewer at the start) by more than
    ``threshold``. ``baseline_frames=1`` is the forward difference."""
    if baseline_frames < 1:
        raise ValueError("baseline_frames must be >= 1")
    env = np.asarray(envelope, dtype=np.float64)
    if env.size < 2:
        return np.zeros(0, dtype=np.int64)
    if baseline_frames == 1:
        return np.flatnonzero(np.diff(env) > threshold) + 1
    padded = np.r_[np.full(baseline_frames, np.nan), env[:-1]]
    windows = np.lib.stride_tricks.sliding_window_view(padded, baseline_frames)[1:]
    rise = env[1:] - np.nanmedian(windows, axis=1)
    return np.flatnonzero(rise > threshold) + 1


def mean_shift_mode(density: np.ndarray, start: float, bandwidth: float,
                    tol: float = 1e-6, max_iter: int = 2000) -> float:
    """Climb from ``start`` to a mode of ``sum_s density[s] * N(x; s, bandwidth)``.

    Units are envelope samples. The Gaussian kernel's mean-shift iteration is
    a bounded-step gradient ascent on that density.
    """
    x = float(start)
    reach = 6.0 * bandwidth
    n = len(density)
    for _ in range(max_iter):
        lo = max(0, int(np.floor(x - reach)))
        hi = min(n, int(np.ceil(x + reach)) + 1)
        s = np.arange(lo, hi, dtype=np.float64)
        w = density[lo:hi] * np.exp(-0.5 * ((s - x) / bandwidth) ** 2)
        total = w.sum()
        if total <= 0:
            return x
        x_new = float(w @ s / total)
        if abs(x_new - x) < tol:
            return x_new
        x = x_new
    return x


def non_maximal_suppression(times, confidences, min_sep: float) -> np.ndarray:
    """Greedy NMS by descending confidence; returns kept indices in time order."""
    times = np.asarray(times, dtype=np.float64)
    order = np.lexsort((times, -np.asarray(confidences, dtype=np.float64)))
    kept: list[int] = []
    for i in order:
        if all(abs(times[i] - times[j]) >= min_sep for j in kept):
            kept.append(int(i))
    return np.array(sorted(kept, key=lambda i: times[i]), dtype=np.int64)


def _peak_near(env: np.ndarray, mode: float, half: int) -> int:
    """Index of the largest envelope sample within ``half`` samples of ``mode``."""
    lo = max(0, int(round(mode)) - half)
    hi = min(len(env), int(round(mode)) + half + 1)
    return lo + int(np.argmax(env[lo:hi]))


def detect_onsets(signal, *, env_rate: float = DEFAULT_ENV_RATE, threshold: float | None = None,
                  min_sep: float = DEFAULT_MIN_SEP, bandwidth: float = DEFAULT_BANDWIDTH,
                  threshold_factor: float = DEFAULT_THRESHOLD_FACTOR,
                  baseline_frames: int = DEFAULT_BASELINE_FRAMES) -> OnsetList:
    """Detect impact onsets in a waveform or in an amplitude envelope.

    Parameters
    ----------
    signal : Waveform or array_like
        A waveform, reduced with :func:`amplitude_envelope`, or an envelope
        already sampled at ``env_rate``.
    threshold : float, optional
        Minimum rise of the envelope above its recent baseline for a
        candidate. Defaults to :func:`default_threshold`.
    baseline_frames : int
        Preceding envelope samples whose median is the baseline.
    min_sep, bandwidth : float
        Seconds.

    Returns
    -------
    OnsetList
        Onset times in seconds and the peak envelope amplitude near each one.
    """
    if min_sep <= 0 or bandwidth <= 0:
        raise ValueError("min_sep and bandwidth must be positive")
    if isinstance(signal, Waveform):
        env = amplitude_envelope(signal, env_rate)
    else:
        env = np.asarray(signal, dtype=np.float64).reshape(-1)
        if np.any(env < 0):
            raise ValueError("amplitude envelope must be nonnegative")
    if env.size < 2 or not np.any(env > 0):
        return OnsetList([], [])
    if threshold is None:
        threshold = default_threshold(env, threshold_factor)
    h = bandwidth * env_rate
    density = np.maximum(env - np.median(env), 0.0)
    candidates = gradient_candidates(env, threshold, baseline_frames)
    modes = sorted(mean_shift_mode(density, c, h) for c in candidates)
    if not modes:
        return OnsetList([], [])

    merged = [[modes[0]]]
    for m in modes[1:]:
        if m - merged[-1][-1] < 0.5:
            merged[-1].append(m)
        else:
            merged.append([m])
    half = max(1, int(np.ceil(h)))
    peaks = np.array([_peak_near(env, np.mean(group), half) for group in merged])
    peaks = np.unique(peaks)
    conf = env[peaks]
    times = peaks / env_rate
    keep = non_maximal_suppression(times, conf, min_sep)
    return OnsetList(times[keep], conf[keep])


def extract_clip(wave: Waveform, features: FeatureSequence, onset_time: float,
                 n_frames: int = 15) -> tuple[Waveform, FeatureSequence]:
    """Cut ``n_frames`` video frames centred on the onset, plus the matching audio.

    The onset's frame is ``floor(onset_time * frame_rate)``. Frames and audio
    outside the recording are zero-padded.
    """
    if n_frames < 1 or n_frames % 2 == 0:
        raise ValueError("n_frames must be a positive odd number")
    duration = max(wave.duration, features.n_frames / features.frame_rate)
    if not 0 <= onset_time <= duration:
        raise ValueError(f"onset {onset_time} s lies outside the recording (0..{duration} s)")
    fps = features.frame_rate
    centre = int(np.floor(onset_time * fps + 1e-9))
    first = centre - n_frames // 2
    frames = np.zeros((n_frames, features.dim))
    src = np.arange(first, first + n_frames)
    ok = (src >= 0) & (src < features.n_frames)
    frames[ok] = features.frames[src[ok]]

    sr = wave.sample_rate
    a0 = int(round(first / fps * sr))
    n_audio = int(round(n_frames / fps * sr))
    audio = np.zeros(n_audio)
    idx = np.arange(a0, a0 + n_audio)
    ok = (idx >= 0) & (idx < len(wave))
    audio[ok] = wave.samples[idx[ok]]
    return Waveform(audio, sr), FeatureSequence(frames, fps)
