"""Audio, matrix and manifest file I/O.

Three on-disk formats are handled here:

* WAV (RIFF/WAVE), PCM16 or IEEE float32. Stereo is averaged to mono on read.
* Binary matrix files. A 4-byte magic (``CGM1`` for cochleagrams, ``FTR1`` for
  per-frame feature sequences), two little-endian u32 values
  ``(channels, frames)``, one little-endian f64 ``rate_hz`` and then a
  frame-major float32 payload.
* JSON-lines dataset manifests.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

COCHLEAGRAM_MAGIC = b"CGM1"
FEATURE_MAGIC = b"FTR1"
_MATRIX_HEADER = struct.Struct("<4sIId")

SPLITS = ("train", "test")
LABEL_KEYS = ("material", "action", "reaction")


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class UnsupportedFormatError(FormatError):
    """A well-formed file uses an encoding we do not read."""


@dataclass(frozen=True)
class Waveform:
    """Mono audio signal.

    Parameters
    ----------
    samples : ndarray of shape (n_samples,)
        Amplitudes, nominally in [-1, 1].
    sample_rate : int
        Sampling rate in Hz.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class FeatureSequence:
    """Per-video-frame feature vectors computed by an external image model."""

    frames: np.ndarray
    frame_rate: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"frames must be an (N>=1, D) matrix, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("feature sequence contains non-finite values")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "frame_rate", float(self.frame_rate))

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


# --------------------------------------------------------------------- WAV

def _parse_chunks(data: bytes):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE file")
    chunks = {}
    pos = 12
    while pos < len(data):
        if pos + 8 > len(data):
            raise FormatError("truncated chunk header")
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"truncated {cid!r} chunk: expected {size} bytes, found {len(body)}")
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    if b"fmt " not in chunks or b"data" not in chunks:
        raise FormatError("missing fmt or data chunk")
    return chunks


def read_waveform(path: str | os.PathLike) -> Waveform:
    """Read a PCM16 or float32 WAV file as a mono :class:`Waveform`.

    Integer PCM is scaled by ``2**-15``; multi-channel audio is averaged.
    """
    data = Path(path).read_bytes()
    chunks = _parse_chunks(data)
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise FormatError("fmt chunk too short")
    tag, n_chan, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == 0xFFFE and len(fmt) >= 26:  # WAVE_FORMAT_EXTENSIBLE: real tag in the subformat GUID
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if n_chan < 1 or rate < 1:
        raise FormatError("invalid channel count or sample rate")
    if tag == 1 and bits == 16:
        dtype, scale = np.dtype("<i2"), 2.0 ** -15
    elif tag == 3 and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedFormatError(f"unsupported WAV encoding (format tag {tag}, {bits} bits)")
    if block_align != n_chan * dtype.itemsize:
        raise FormatError("block alignment does not match channel layout")
    payload = chunks[b"data"]
    if len(payload) % block_align:
        raise FormatError("data chunk is not a whole number of frames")
    frames = np.frombuffer(payload, dtype=dtype).reshape(-1, n_chan).astype(np.float64)
    samples = frames.mean(axis=1) * scale
    return Waveform(samples, rate)


def write_waveform(path: str | os.PathLike, wave: Waveform, encoding: str = "float32") -> None:
    """Write a mono WAV file.

    Parameters
    ----------
    encoding : {'float32', 'pcm16'}
        ``pcm16`` clips to [-1, 1) and rounds to the nearest 2**-15 step.
    """
    samples = np.asarray(wave.samples, dtype=np.float64)
    if not np.all(np.isfinite(samples)):
        raise ValueError("cannot write non-finite samples")
    if encoding == "float32":
        tag, bits = 3, 32
        payload = samples.astype("<f4").tobytes()
    elif encoding == "pcm16":
        tag, bits = 1, 16
        q = np.clip(np.round(samples * 2 ** 15), -2 ** 15, 2 ** 15 - 1)
        payload = q.astype("<i2").tobytes()
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, wave.sample_rate, wave.sample_rate * block, block, bits)
    buf = io.BytesIO()
    buf.write(b"RIFF")
    buf.write(struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(payload)))
    buf.write(b"WAVE")
    buf.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
    buf.write(b"data" + struct.pack("<I", len(payload)) + payload)
    Path(path).write_bytes(buf.getvalue())


# ------------------------------------------------------------ matrix files

def write_matrix(path, matrix: np.ndarray, rate_hz: float, magic: bytes = COCHLEAGRAM_MAGIC) -> None:
    """Write a (frames, channels) matrix in the binary matrix format."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("matrix must be 2-D (frames, channels)")
    frames, channels = m.shape
    header = _MATRIX_HEADER.pack(magic, channels, frames, float(rate_hz))
    Path(path).write_bytes(header + m.astype("<f4").tobytes())


def read_matrix(path, magic: bytes | None = None) -> tuple[np.ndarray, float, bytes]:
    """Read a matrix file; returns ``(matrix, rate_hz, magic)``."""
    data = Path(path).read_bytes()
    if len(data) < _MATRIX_HEADER.size:
        raise FormatError("file shorter than matrix header")
    found, channels, frames, rate = _MATRIX_HEADER.unpack_from(data)
    if found not in (COCHLEAGRAM_MAGIC, FEATURE_MAGIC):
        raise FormatError(f"bad magic bytes {found!r}")
    if magic is not None and found != magic:
        raise FormatError(f"expected magic {magic!r}, found {found!r}")
    payload = data[_MATRIX_HEADER.size:]
    if len(payload) != 4 * channels * frames:
        raise FormatError(
            f"header declares {channels}x{frames} values but payload holds {len(payload) // 4}")
    m = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(frames, channels)
    return m, rate, found


def read_cochleagram(path, compression: float = 0.3, sqrt_domain: bool = False):
    from .cochlea import Cochleagram

    env, rate, _ = read_matrix(path, COCHLEAGRAM_MAGIC)
    return Cochleagram(env, rate, compression=compression, sqrt_domain=sqrt_domain)


def write_cochleagram(path, coch) -> None:
    write_matrix(path, coch.env, coch.env_rate, COCHLEAGRAM_MAGIC)


def read_features(path) -> FeatureSequence:
    frames, rate, _ = read_matrix(path, FEATURE_MAGIC)
    return FeatureSequence(frames, rate)


def write_features(path, feats: FeatureSequence) -> None:
    write_matrix(path, feats.frames, feats.frame_rate, FEATURE_MAGIC)


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestEntry:
    audio: str
    features: str
    split: str
    labels: dict = field(default_factory=dict)
    onsets: list | None = None

    def to_json(self) -> dict:
        out = {"audio": self.audio, "features": self.features, "split": self.split}
        out.update(self.labels)
        if self.onsets is not None:
            out["onsets"] = list(self.onsets)
        return out


@dataclass
class DatasetManifest:
    entries: list
    root: Path = Path(".")

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def label_vocab(self, key: str) -> list:
        """Sorted label vocabulary for one annotation key."""
        return sorted({e.labels[key] for e in self.entries if key in e.labels})


def read_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Parse a JSON-lines manifest. Relative paths resolve against its folder."""
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        missing = {"audio", "features", "split"} - obj.keys()
        if missing:
            raise FormatError(f"{path}:{lineno}: missing keys {sorted(missing)}")
        if obj["split"] not in SPLITS:
            raise FormatError(f"{path}:{lineno}: split must be one of {SPLITS}")
        unknown = obj.keys() - {"audio", "features", "split", "onsets", *LABEL_KEYS}
        if unknown:
            raise FormatError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
        onsets = obj.get("onsets")
        if onsets is not None:
            onsets = [float(t) for t in onsets]
        labels = {k: obj[k] for k in LABEL_KEYS if k in obj}
        entries.append(ManifestEntry(obj["audio"], obj["features"], obj["split"], labels, onsets))
    manifest = DatasetManifest(entries, path.parent)
    shared = {e.audio for e in manifest.split("train")} & {e.audio for e in manifest.split("test")}
    if shared:
        raise FormatError(f"recordings appear in both splits: {sorted(shared)[:3]}")
    if check_paths:
        for e in entries:
            for rel in (e.audio, e.features):
                if not manifest.resolve(rel).exists():
                    raise FileNotFoundError(f"manifest path does not exist: {rel}")
    return manifest


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    lines = [json.dumps(e.to_json(), sort_keys=True) for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
