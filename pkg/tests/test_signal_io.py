import json
import struct

import numpy as np
import pytest

from impactsound.cochlea import Cochleagram
from impactsound.signal_io import (FeatureSequence, FormatError, ManifestEntry,
                                   UnsupportedFormatError, Waveform, read_cochleagram,
                                   read_features, read_manifest, read_matrix, read_waveform,
                                   write_cochleagram, write_features, write_manifest, write_matrix,
                                   write_waveform)


def _wav_bytes(fmt_tag, channels, rate, bits, payload):
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", fmt_tag, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


class TestWaveform:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Waveform(np.array([0.0, np.nan]), 100)

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            Waveform(np.zeros(3), 0)

    def test_duration(self):
        assert Waveform(np.zeros(21600), 21600).duration == pytest.approx(1.0)


class TestReadWaveform:
    def test_pcm16_scaling(self, tmp_path):
        p = tmp_path / "a.wav"
        p.write_bytes(_wav_bytes(1, 1, 8000, 16, np.array([0, 16384, -16384], "<i2").tobytes()))
        w = read_waveform(p)
        np.testing.assert_array_equal(w.samples, [0.0, 0.5, -0.5])
        assert w.sample_rate == 8000

    def test_stereo_is_averaged(self, tmp_path):
        p = tmp_path / "s.wav"
        frames = np.tile(np.array([0.2, 0.4], "<f4"), 5)
        p.write_bytes(_wav_bytes(3, 2, 44100, 32, frames.tobytes()))
        w = read_waveform(p)
        np.testing.assert_allclose(w.samples, 0.3, rtol=1e-6)
        assert w.sample_rate == 44100

    def test_truncated_chunk(self, tmp_path):
        p = tmp_path / "t.wav"
        p.write_bytes(_wav_bytes(1, 1, 8000, 16, np.zeros(100, "<i2").tobytes())[:-20])
        with pytest.raises(FormatError):
            read_waveform(p)

    def test_not_riff(self, tmp_path):
        p = tmp_path / "x.wav"
        p.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(FormatError):
            read_waveform(p)

    def test_unsupported_encoding(self, tmp_path):
        p = tmp_path / "u.wav"
        p.write_bytes(_wav_bytes(1, 1, 8000, 24, b"\x00" * 30))
        with pytest.raises(UnsupportedFormatError):
            read_waveform(p)

    def test_deterministic(self, tmp_path, rng):
        p = tmp_path / "d.wav"
        write_waveform(p, Waveform(rng.uniform(-1, 1, 500), 16000), "pcm16")
        np.testing.assert_array_equal(read_waveform(p).samples, read_waveform(p).samples)


class TestWriteWaveform:
    def test_float32_round_trip(self, tmp_path, rng):
        x = rng.uniform(-1, 1, 1000).astype(np.float32).astype(np.float64)
        write_waveform(tmp_path / "f.wav", Waveform(x, 21600))
        np.testing.assert_array_equal(read_waveform(tmp_path / "f.wav").samples, x)

    def test_pcm16_quantisation(self, tmp_path):
        write_waveform(tmp_path / "p.wav", Waveform(np.array([0.50001, -0.25]), 21600), "pcm16")
        back = read_waveform(tmp_path / "p.wav").samples
        np.testing.assert_allclose(back, [0.50001, -0.25], atol=2.0 ** -15)

    def test_nan_rejected(self, tmp_path):
        class Fake:
            samples = np.array([0.0, np.nan])
            sample_rate = 100
        with pytest.raises(ValueError):
            write_waveform(tmp_path / "n.wav", Fake())


class TestMatrixFiles:
    def test_round_trip(self, tmp_path):
        m = np.arange(6, dtype=np.float64).reshape(2, 3) / 7
        m32 = m.astype(np.float32).astype(np.float64)
        write_cochleagram(tmp_path / "c.cgm", Cochleagram(np.abs(m32) + 0, 90.0))
        back = read_cochleagram(tmp_path / "c.cgm")
        np.testing.assert_array_equal(back.env, m32)
        assert back.env_rate == 90.0

    def test_layout_is_frame_major(self, tmp_path):
        m = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        write_matrix(tmp_path / "m.cgm", m, 90.0)
        raw = (tmp_path / "m.cgm").read_bytes()
        magic, channels, frames, rate = struct.unpack_from("<4sIId", raw)
        assert (magic, channels, frames, rate) == (b"CGM1", 3, 2, 90.0)
        np.testing.assert_array_equal(np.frombuffer(raw[20:], "<f4"), [1, 2, 3, 4, 5, 6])

    def test_payload_mismatch(self, tmp_path):
        raw = struct.pack("<4sIId", b"CGM1", 42, 10, 90.0) + np.zeros(41 * 10, "<f4").tobytes()
        (tmp_path / "bad.cgm").write_bytes(raw)
        with pytest.raises(FormatError):
            read_cochleagram(tmp_path / "bad.cgm")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.cgm").write_bytes(struct.pack("<4sIId", b"XXXX", 1, 1, 90.0) + b"\0" * 4)
        with pytest.raises(FormatError):
            read_matrix(tmp_path / "bad.cgm")

    def test_wrong_kind(self, tmp_path):
        write_features(tmp_path / "f.ftr", FeatureSequence(np.ones((2, 3)), 30.0))
        with pytest.raises(FormatError):
            read_cochleagram(tmp_path / "f.ftr")

    def test_empty_cochleagram(self, tmp_path):
        write_cochleagram(tmp_path / "e.cgm", Cochleagram(np.zeros((0, 42)), 90.0))
        back = read_cochleagram(tmp_path / "e.cgm")
        assert back.env.shape == (0, 42)

    def test_features_round_trip(self, tmp_path, rng):
        f = rng.normal(size=(15, 16)).astype(np.float32).astype(np.float64)
        write_features(tmp_path / "f.ftr", FeatureSequence(f, 30.0))
        back = read_features(tmp_path / "f.ftr")
        np.testing.assert_array_equal(back.frames, f)
        assert back.frame_rate == 30.0


class TestManifest:
    def _files(self, tmp_path, names):
        for n in names:
            (tmp_path / n).write_bytes(b"")

    def test_round_trip(self, tmp_path):
        self._files(tmp_path, ["a.wav", "a.ftr", "b.wav", "b.ftr"])
        entries = [ManifestEntry("a.wav", "a.ftr", "train", {"material": "wood"}, [0.25]),
                   ManifestEntry("b.wav", "b.ftr", "test", {"material": "metal"})]
        write_manifest(tmp_path / "m.jsonl", entries)
        m = read_manifest(tmp_path / "m.jsonl")
        assert [e.audio for e in m.split("train")] == ["a.wav"]
        assert m.entries[0].onsets == [0.25]
        assert m.label_vocab("material") == ["metal", "wood"]
        assert m.resolve("a.wav") == tmp_path / "a.wav"

    def test_unknown_key(self, tmp_path):
        (tmp_path / "m.jsonl").write_text(json.dumps(
            {"audio": "a", "features": "b", "split": "train", "colour": "red"}) + "\n")
        with pytest.raises(FormatError):
            read_manifest(tmp_path / "m.jsonl", check_paths=False)

    def test_splits_disjoint(self, tmp_path):
        lines = [{"audio": "a.wav", "features": "a.ftr", "split": s} for s in ("train", "test")]
        (tmp_path / "m.jsonl").write_text("\n".join(json.dumps(x) for x in lines))
        with pytest.raises(FormatError):
            read_manifest(tmp_path / "m.jsonl", check_paths=False)

    def test_missing_path(self, tmp_path):
        (tmp_path / "m.jsonl").write_text(json.dumps(
            {"audio": "nope.wav", "features": "nope.ftr", "split": "train"}))
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path / "m.jsonl")
