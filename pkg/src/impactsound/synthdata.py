"""Synthetic impact datasets with known structure, for end-to-end checks.

Three sets are produced:

* ``clips``: short impact clips from a few classes. Each class has its own
  spectral centre (in ERB) and decay time, and a fixed 16-dim visual code
  that is emitted, with noise, on the frames around the impact.
* ``long``: long recordings with several impacts of random classes and the
  matching feature streams, annotated with onset times.
* ``spectral``: clips whose classes differ only in the fine placement of a
  narrow-band component among random distractors, so they are separable at
  high but not at low frequency resolution.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cochlea import DEFAULT_SAMPLE_RATE, erb_number
from .signal_io import (FeatureSequence, ManifestEntry, Waveform, write_features, write_manifest,
                        write_waveform)

FEATURE_DIM = 16
FRAME_RATE = 30.0
CLIP_FRAMES = 15
CLASS_NAMES = ("wood", "metal", "leaf", "glass", "rock", "cloth", "tile", "carpet")


@dataclass(frozen=True)
class ImpactClass:
    name: str
    center_erb: float
    width_erb: float
    decay_s: float
    code: np.ndarray


def make_classes(n_classes: int = 4, seed: int = 0) -> list:
    """Classes with well separated spectral centres, distinct decays and random unit codes."""
    rng = np.random.default_rng([seed, 1])
    centers = np.linspace(8.0, 30.0, n_classes)
    decays = np.geomspace(0.02, 0.2, n_classes)[rng.permutation(n_classes)]
    out = []
    for c in range(n_classes):
        code = rng.normal(size=FEATURE_DIM)
        out.append(ImpactClass(CLASS_NAMES[c % len(CLASS_NAMES)] + ("" if c < len(CLASS_NAMES) else str(c)),
                               float(centers[c]), 2.5, float(decays[c]), code / np.linalg.norm(code)))
    return out


def shaped_noise(n: int, sample_rate: int, center_erb, width_erb, amps, rng) -> np.ndarray:
    """White noise with a sum of Gaussian bumps (in ERB) as magnitude spectrum."""
    spec = np.fft.rfft(rng.normal(size=n))
    erb = erb_number(np.fft.rfftfreq(n, 1.0 / sample_rate))
    shape = np.zeros_like(erb)
    for c, w, a in zip(np.atleast_1d(center_erb), np.atleast_1d(width_erb), np.atleast_1d(amps)):
        shape += a * np.exp(-0.5 * ((erb - c) / w) ** 2)
    x = np.fft.irfft(spec * shape, n)
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12)


def impact_sound(cls: ImpactClass, n: int, onset: float, sample_rate: int, amplitude: float,
                 rng) -> np.ndarray:
    t = np.arange(n) / sample_rate - onset
    env = np.where(t >= 0, np.exp(-np.maximum(t, 0) / cls.decay_s), 0.0)
    env *= np.minimum(1.0, np.maximum(t, 0) * sample_rate / 20 + (t >= 0))  # no click before onset
    return amplitude * env * shaped_noise(n, sample_rate, cls.center_erb, cls.width_erb, 1.0, rng)


def add_code(frames: np.ndarray, cls: ImpactClass, onset_frame: int, amplitude: float) -> None:
    """Add the class code, scaled by a short decaying bump, from the onset frame on."""
    for d, w in enumerate((1.0, 0.6, 0.3)):
        if 0 <= onset_frame + d < frames.shape[0]:
            frames[onset_frame + d] += amplitude * w * cls.code


def make_clips(out_dir, n_classes: int = 4, clips_per_class: int = 60, test_fraction: float = 1 / 3,
               sample_rate: int = DEFAULT_SAMPLE_RATE, noise: float = 0.1, seed: int = 0) -> list:
    """Write impact clips, their features and a manifest; returns the entries."""
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    classes = make_classes(n_classes, seed)
    rng = np.random.default_rng([seed, 2])
    n_audio = int(round(CLIP_FRAMES / FRAME_RATE * sample_rate))
    centre = CLIP_FRAMES // 2
    onset = (centre + 0.5) / FRAME_RATE
    n_test = int(round(clips_per_class * test_fraction))
    entries = []
    for c, cls in enumerate(classes):
        for j in range(clips_per_class):
            amp = rng.uniform(0.3, 0.8)
            wave = impact_sound(cls, n_audio, onset, sample_rate, amp, rng)
            wave += 1e-3 * rng.normal(size=n_audio)
            feats = rng.normal(scale=noise, size=(CLIP_FRAMES, FEATURE_DIM))
            add_code(feats, cls, centre, amp / 0.55)
            stem = f"clips/clip_{c:02d}_{j:03d}"
            write_waveform(out_dir / f"{stem}.wav", Waveform(wave, sample_rate))
            write_features(out_dir / f"{stem}.ftr", FeatureSequence(feats, FRAME_RATE))
            split = "test" if j < n_test else "train"
            entries.append(ManifestEntry(f"{stem}.wav", f"{stem}.ftr", split, {"material": cls.name},
                                         [onset]))
    write_manifest(out_dir / "manifest.jsonl", entries)
    return entries


def long_sequence(classes: list, seconds: float = 30.0, n_impacts: int = 10,
                  sample_rate: int = DEFAULT_SAMPLE_RATE, noise: float = 0.1, min_gap: float = 1.0,
                  rng=None):
    """One long recording: ``(wave, features, onset_times, class_indices)``."""
    rng = np.random.default_rng(rng)
    n_frames = int(round(seconds * FRAME_RATE))
    slots = np.arange(1, n_frames - CLIP_FRAMES)
    while True:
        frames = np.sort(rng.choice(slots, size=n_impacts, replace=False))
        if np.all(np.diff(frames) >= min_gap * FRAME_RATE):
            break
    kinds = rng.integers(len(classes), size=n_impacts)
    amps = rng.uniform(0.3, 0.8, size=n_impacts)
    n = int(round(seconds * sample_rate))
    wave = 1e-3 * rng.normal(size=n)
    onsets = (frames + 0.5) / FRAME_RATE
    for t, k, a in zip(onsets, kinds, amps):
        start = int(round((t - 0.05) * sample_rate))
        seg = impact_sound(classes[k], min(n - start, int(0.6 * sample_rate)), 0.05, sample_rate, a, rng)
        wave[start:start + seg.size] += seg
    feats = rng.normal(scale=noise, size=(n_frames, FEATURE_DIM))
    for fr, k, a in zip(frames, kinds, amps):
        add_code(feats, classes[k], int(fr), a / 0.55)
    return Waveform(wave, sample_rate), FeatureSequence(feats, FRAME_RATE), onsets, kinds


def make_long(out_dir, n_sequences: int = 4, n_train: int = 4, seconds: float = 30.0,
              n_impacts: int = 10, n_classes: int = 4, sample_rate: int = DEFAULT_SAMPLE_RATE,
              seed: int = 0) -> list:
    """Write ``n_train`` training and ``n_sequences`` test recordings plus a manifest."""
    out_dir = Path(out_dir)
    (out_dir / "long").mkdir(parents=True, exist_ok=True)
    classes = make_classes(n_classes, seed)
    rng = np.random.default_rng([seed, 3])
    entries = []
    for i in range(n_train + n_sequences):
        wave, feats, onsets, kinds = long_sequence(classes, seconds, n_impacts, sample_rate, rng=rng)
        stem = f"long/long_{i:03d}"
        write_waveform(out_dir / f"{stem}.wav", wave)
        write_features(out_dir / f"{stem}.ftr", feats)
        entries.append(ManifestEntry(f"{stem}.wav", f"{stem}.ftr", "train" if i < n_train else "test",
                                     {}, [round(float(t), 6) for t in onsets]))
    write_manifest(out_dir / "long_manifest.jsonl", entries)
    return entries


def spectral_class_clip(label: int, n: int, sample_rate: int, rng, *, base_erb: float = 20.0,
                        spacing_erb: float = 1.0, n_classes: int = 4, n_distractors: int = 3,
                        onset: float = 0.25) -> np.ndarray:
    """Narrow-band target at ``base + label * spacing`` ERB among random distractors.

    Distractors fall anywhere in the span of the class positions (plus a
    margin), so band energies pooled over several ERB carry little class
    information while a fine filterbank resolves the target's channel.
    """
    lo = base_erb - 1.5 * spacing_erb
    hi = base_erb + (n_classes + 0.5) * spacing_erb
    centers = np.r_[base_erb + label * spacing_erb, rng.uniform(lo, hi, n_distractors)]
    amps = np.r_[1.0, rng.uniform(0.3, 1.0, n_distractors)]
    x = shaped_noise(n, sample_rate, centers, np.full(centers.size, 0.15), amps, rng)
    t = np.arange(n) / sample_rate - onset
    env = np.where(t >= 0, np.exp(-np.maximum(t, 0) / 0.08), 0.0)
    return rng.uniform(0.2, 0.8) * env * x + 1e-3 * rng.normal(size=n)


def make_spectral(out_dir, n_classes: int = 4, clips_per_class: int = 60, test_fraction: float = 1 / 3,
                  sample_rate: int = DEFAULT_SAMPLE_RATE, seed: int = 0) -> list:
    out_dir = Path(out_dir)
    (out_dir / "spectral").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 4])
    n = int(round(0.5 * sample_rate))
    n_test = int(round(clips_per_class * test_fraction))
    entries = []
    for c in range(n_classes):
        for j in range(clips_per_class):
            wave = spectral_class_clip(c, n, sample_rate, rng, n_classes=n_classes)
            stem = f"spectral/spec_{c:02d}_{j:03d}"
            write_waveform(out_dir / f"{stem}.wav", Waveform(wave, sample_rate))
            write_features(out_dir / f"{stem}.ftr", FeatureSequence(np.zeros((1, 1)), FRAME_RATE))
            entries.append(ManifestEntry(f"{stem}.wav", f"{stem}.ftr",
                                         "test" if j < n_test else "train",
                                         {"material": f"class{c}"}, [0.25]))
    write_manifest(out_dir / "spectral_manifest.jsonl", entries)
    return entries


def make_synth(out_dir, *, n_classes: int = 4, clips_per_class: int = 60, n_long: int = 4,
               n_long_train: int = 4,
               spectral_per_class: int = 60, sample_rate: int = DEFAULT_SAMPLE_RATE,
               seed: int = 0) -> dict:
    """Write all three synthetic sets under ``out_dir``; returns entry counts."""
    return {
        "clips": len(make_clips(out_dir, n_classes, clips_per_class, sample_rate=sample_rate,
                                seed=seed)),
        "long": len(make_long(out_dir, n_long, n_long_train, n_classes=n_classes,
                              sample_rate=sample_rate, seed=seed)),
        "spectral": len(make_spectral(out_dir, n_classes, spectral_per_class,
                                      sample_rate=sample_rate, seed=seed)),
    }


__all__ = ["ImpactClass", "make_classes", "make_clips", "make_long", "make_spectral", "make_synth",
           "long_sequence", "impact_sound", "spectral_class_clip"]
