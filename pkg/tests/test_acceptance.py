"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""
import time

import numpy as np
import pytest

from impactsound.cli import main
from impactsound.cochlea import Cochleagram, build_filterbank, pca_fit, subband_envelopes
from impactsound.evalkit import (channel_sweep, class_averaged_accuracy, classify_predictions_protocol,
                                 clip_features, detection_ap, match_detections,
                                 pooled_detection_ap, train_classifier)
from impactsound.onset import detect_onsets, non_maximal_suppression
from impactsound.seqmodel import LstmNetwork, LstmRegressor, TrainConfig, align_shifts, labeling_cost
from impactsound.seqmodel.align import potts_weights, shift_weights, unary_costs
from impactsound.seqmodel.training import window_sequences
from impactsound.signal_io import Waveform, read_features, read_manifest, read_waveform
from impactsound.synthesis import (ColoringTransform, build_exemplar_db, detect_and_transfer,
                                   parametric_invert, predicted_onsets)

from ._helpers import (AP_FIXTURE, SR, brute_force_alignment, network_grad_error, numeric_grad,
                       record, rel_error, smooth_envelopes)

EPS = 1.0 / 625


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    assert main(["make-synth", str(out)]) == 0
    return out


def test_criterion_1_filterbank_partition():
    t0 = time.perf_counter()
    fb = build_filterbank(SR)
    freqs = np.linspace(0.0, SR / 2, 4096)
    err = float(np.max(np.abs(np.sum(fb.gains(freqs) ** 2, axis=0) - 1.0)))
    elapsed = time.perf_counter() - t0
    ok = record(1, err <= 1e-3 and elapsed < 1.0, f"max |sum r^2 - 1| = {err:.2e}, {elapsed:.2f} s")
    assert ok


def test_criterion_2_homogeneity(fb):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst, zeros_ok = 0.0, True
    for _ in range(20):
        x = 0.1 * rng.normal(size=SR // 2)
        ref = subband_envelopes(Waveform(x, SR), fb).env
        live = ref > 0  # resampling undershoot is clipped to exact zeros
        for g in (0.25, 4.0):
            scaled = subband_envelopes(Waveform(g * x, SR), fb).env
            zeros_ok &= bool(np.all(scaled[~live] == 0))
            worst = max(worst, float(np.max(np.abs(scaled[live] / (g ** 0.3 * ref[live]) - 1))))
    elapsed = time.perf_counter() - t0
    ok = record(2, worst <= 0.01 and zeros_ok and elapsed < 5.0,
                f"worst relative deviation {worst:.2e}, zeros stay zero: {zeros_ok}, "
                f"{elapsed:.1f} s")
    assert ok


def test_criterion_3_round_trip(fb):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    errs = []
    for i in range(20):
        S = Cochleagram(smooth_envelopes(90, fb.n_channels, rng), 90.0)
        R = subband_envelopes(parametric_invert(S, fb, seed=i), fb)
        errs.append(np.linalg.norm(R.env - S.env) / np.linalg.norm(S.env))
    elapsed = time.perf_counter() - t0
    ok = record(3, max(errs) <= 0.15 and elapsed < 30, f"max relative L2 error {max(errs):.3f} "
                f"(mean {np.mean(errs):.3f}), {elapsed:.1f} s")
    assert ok


def test_criterion_4_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    errors = {}
    net = LstmNetwork.initialize(6, 8, 2, 3, 3, "last", 0, 0.5, rng)
    X, Y = rng.normal(size=(2, 4, 6)), rng.normal(size=(2, 12, 3))
    errors["lstm+head+loss"] = network_grad_error(net, X, Y, TrainConfig(epsilon_loss=EPS))
    Y_big = 2.0 * rng.normal(size=(1, 12, 3))
    errors["aligned"] = network_grad_error(net, X[:1], Y_big,
                                           TrainConfig(epsilon_loss=EPS, align=True, max_shift=2),
                                           h=1e-7)
    from impactsound.seqmodel import robust_loss
    from impactsound.cochlea import pca_invert
    from impactsound.seqmodel.regressor import pca_invert_backward
    p, t = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    g = robust_loss(p, t, EPS)[1]
    errors["loss"] = rel_error(g, numeric_grad(lambda v: robust_loss(v.reshape(12, 3), t, EPS)[0],
                                               p.ravel()))
    pca = pca_fit(rng.normal(size=(60, 8)), 3)
    target = rng.normal(size=(12, 8))
    g = pca_invert_backward(pca, robust_loss(pca_invert(pca, p), target, EPS)[1])
    errors["through pca"] = rel_error(g, numeric_grad(
        lambda v: robust_loss(pca_invert(pca, v.reshape(12, 3)), target, EPS)[0], p.ravel()))
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    ok = record(4, worst <= 1e-4 and elapsed < 60,
                ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f", {elapsed:.1f} s")
    assert ok


def _enumerated_min(U, V, max_shift):
    """Minimum over all labelings, summed in the same order as ``labeling_cost``."""
    T, S = U.shape
    grids = np.stack(np.meshgrid(*[np.arange(S)] * T, indexing="ij"), -1).reshape(-1, T)
    cost = np.zeros(grids.shape[0])
    for t in range(T):
        cost = cost + U[t, grids[:, t]]
        if t + 1 < T:
            cost = cost + np.where(grids[:, t] != grids[:, t + 1], V[t], 0.0)
    return float(cost.min())


def test_criterion_5_shift_hmm():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    exact = 0
    oracle_ok = True
    for trial in range(200):
        T = int(rng.integers(1, 7))
        ms = int(rng.integers(1, 3))
        pred = rng.normal(size=(T, 3)) * rng.uniform(0.5, 3)
        target = rng.normal(size=(T, 3)) * rng.uniform(0.5, 3)
        norms = np.linalg.norm(target, axis=1)
        lam = float(rng.uniform(0.1, 2.0))
        kw = dict(max_shift=ms, alpha=3.0, tau=2.2, potts_lambda=lam, epsilon=EPS)
        labels, _ = align_shifts(pred, target, norms, **kw)
        dp_cost = labeling_cost(labels, pred, target, norms, **kw)
        U = unary_costs(pred, target, ms, shift_weights(norms, 3.0, 2.2), EPS)
        exact += dp_cost == _enumerated_min(U, potts_weights(norms, lam), ms)
        if trial < 50:
            best, _ = brute_force_alignment(pred, target, norms, ms, 3.0, 2.2, lam, EPS)
            oracle_ok &= abs(best - dp_cost) <= 1e-9
    planted = 0
    for _ in range(50):
        s = int(rng.integers(-8, 9))
        x = rng.normal(size=(60 + abs(s), 5)) * 3 + 5
        T = 60
        if s >= 0:
            pred, target, interior = x[:T], x[s:T + s], slice(0, T - s)
        else:
            pred, target, interior = x[-s:T - s], x[:T], slice(-s, T)
        labels, _ = align_shifts(pred, target, max_shift=8)
        planted += bool(np.all(labels[interior] == s))
    elapsed = time.perf_counter() - t0
    ok = record(5, exact == 200 and oracle_ok and planted == 50 and elapsed < 60,
                f"{exact}/200 bit-exact optima, independent oracle {'ok' if oracle_ok else 'FAIL'}, "
                f"{planted}/50 planted shifts, {elapsed:.1f} s")
    assert ok


def test_criterion_6_onsets():
    tp = fp = fn = 0
    for trial in range(20):
        rng = np.random.default_rng(600 + trial)
        times = np.cumsum(rng.uniform(0.3, 1.5, 40))
        times = times[times < 29.5] + 0.2
        x = 0.1 * rng.normal(size=30 * SR)  # impulse 1.0 over noise 0.1: 20 dB peak SNR
        for t in times:
            x[int(round(t * SR))] += rng.choice([-1.0, 1.0])
        found = detect_onsets(Waveform(x, SR)).times
        d = np.abs(found[:, None] - times[None, :])
        close = d <= 1 / 90 + 1e-9
        tp += int(close.any(axis=1).sum())
        fp += int((~close.any(axis=1)).sum())
        fn += int((~close.any(axis=0)).sum())
    sep_ok = True
    for trial in range(50):
        rng = np.random.default_rng(700 + trial)
        first = np.sort(rng.uniform(0.2, 9.5, 12))
        second = first + rng.uniform(0.02, 0.24, first.size)
        x = 1e-3 * rng.normal(size=10 * SR)
        for t, a in zip(np.r_[first, second], rng.uniform(0.3, 1.0, 24)):
            if t < 9.99:
                x[int(t * SR)] += a
        found = detect_onsets(Waveform(x, SR)).times
        sep_ok &= bool(np.all(np.diff(found) >= 0.25 - 1e-9))
        t_adv = np.cumsum(rng.choice([0.1, 0.2, 0.3], 30))
        keep = non_maximal_suppression(t_adv, np.ones(30), 0.25)
        sep_ok &= bool(np.all(np.diff(t_adv[keep]) >= 0.25 - 1e-12))
    precision = tp / max(tp + fp, 1)
    recall = 1 - fn / max(tp + fn, 1)
    ok = record(6, fp == 0 and fn == 0 and sep_ok,
                f"precision {precision:.3f}, recall {recall:.3f} ({fp} FP, {fn} FN) within +-1 "
                f"sample; NMS separation {'holds' if sep_ok else 'VIOLATED'}")
    assert ok


def _clip_data(synth, fb, split):
    m = read_manifest(synth / "manifest.jsonl")
    entries = m.split(split)
    cochs = [subband_envelopes(read_waveform(m.resolve(e.audio)), fb) for e in entries]
    feats = [read_features(m.resolve(e.features)) for e in entries]
    return cochs, feats, np.array([e.labels["material"] for e in entries])


def test_criterion_7_end_to_end(synth, fb):
    t0 = time.perf_counter()
    c_tr, f_tr, y_tr = _clip_data(synth, fb, "train")
    c_te, f_te, y_te = _clip_data(synth, fb, "test")
    assert len(set(y_tr)) == 4 and len(y_tr) + len(y_te) == 240
    clf = train_classifier(np.stack([clip_features(c) for c in c_tr]), y_tr)
    real_acc = class_averaged_accuracy(clf.predict(np.stack([clip_features(c) for c in c_te])),
                                       y_te)
    model = LstmRegressor(hidden_size=64, n_layers=2, epochs=30)
    model.fit(f_tr, [c.to_sqrt() for c in c_tr])
    pred = [Cochleagram(np.maximum(p, 0.0), 90.0, sqrt_domain=True) for p in model.predict(f_te)]
    acc = classify_predictions_protocol(clf, pred, y_te)
    elapsed = time.perf_counter() - t0
    ok = record(7, acc >= 0.9 and elapsed <= 600,
                f"class-averaged accuracy on predictions {acc:.3f} (real sounds {real_acc:.3f}, "
                f"chance 0.25), {elapsed:.0f} s")
    assert ok


def test_criterion_8_detection_ap(synth, fb):
    t0 = time.perf_counter()
    m = read_manifest(synth / "long_manifest.jsonl")
    xs, ys = [], []
    for e in m.split("train"):
        coch = subband_envelopes(read_waveform(m.resolve(e.audio)), fb, sqrt_domain=True)
        feats = read_features(m.resolve(e.features))
        a, b = window_sequences(feats.frames, coch.env, 3, feats.frame_rate, 2.0, 0.5)
        xs += a
        ys += b
    # the long recordings draw classes at random (one class had 6 of 40 impacts);
    # the labelled clips add 40 balanced examples per class
    c_tr, f_tr, _ = _clip_data(synth, fb, "train")
    xs += [f.frames for f in f_tr]
    ys += [c.to_sqrt().env for c in c_tr]
    model =LstmRegressor(hidden_size=64, n_layers=2, align=True, lag=6, batch_size=4, epochs=30)
    model.fit(xs, ys)
    pairs = []
    for e in m.split("test"):
        pred = model.predict_long(read_features(m.resolve(e.features)))
        pairs.append((predicted_onsets(pred, fb)[1], e.onsets))
    ap = pooled_detection_ap(pairs, 0.1)
    f = AP_FIXTURE
    hits_ok = np.array_equal(match_detections(f["times"], f["confidences"], f["truths"]), f["hits"])
    fixture_ap = detection_ap((f["times"], f["confidences"]), f["truths"])
    fixture_ok = hits_ok and abs(fixture_ap - f["ap"]) <= 1e-15
    elapsed = time.perf_counter() - t0
    ok = record(8, ap >= 0.9 and fixture_ok and elapsed < 300,
                f"pooled AP {ap:.3f} over {len(pairs)} x 30 s; 7-prediction fixture "
                f"{fixture_ap:.6f} vs 187/280 {'ok' if fixture_ok else 'MISMATCH'}, {elapsed:.0f} s")
    assert ok


def test_criterion_9_transfer_identity(fb):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    good = 0
    for trial in range(50):
        waves = []
        for _ in range(6):
            x = 1e-3 * rng.normal(size=SR // 2)
            start = int(rng.integers(3, 10)) * (SR // 90)
            t = np.arange(x.size - start) / SR
            x[start:] += rng.uniform(0.2, 0.8) * np.exp(-t / rng.uniform(0.02, 0.3)) \
                * rng.normal(size=t.size)
            waves.append(Waveform(x, SR))
        db = build_exemplar_db(waves, None, fb, detect=True)
        j = int(rng.integers(len(db)))
        peak = int(rng.integers(20, 70))
        env = np.zeros((90, fb.n_channels))
        env[peak - 1:peak + 7] = db.windows[j].reshape(8, -1)
        out = detect_and_transfer(Cochleagram(env, 90.0), db, None, fb, seed=trial)
        good += (len(out.matches) == 1 and out.matches[0][0] == j
                 and abs(out.placed_times[0] * 90 - peak) <= 1 + 1e-9)
    elapsed = time.perf_counter() - t0
    ok = record(9, good == 50 and elapsed < 30, f"{good}/50 planted entries recovered and placed "
                f"within one frame, {elapsed:.1f} s")
    assert ok


def test_criterion_10_coloring():
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    X = rng.normal(size=(500, 42)) @ rng.normal(size=(42, 42)) + rng.normal(size=42)
    Y = rng.normal(size=(400, 42)) @ rng.normal(size=(42, 42)) * 0.5 - 2.0
    ct = ColoringTransform().fit(X, Y)
    out = ct.transform(X)
    mean_err = float(np.max(np.abs(out.mean(0) - Y.mean(0))))
    cov_t = np.cov(Y.T)
    cov_err = float(np.max(np.abs(np.cov(out.T) - cov_t)))
    bound = ct.eig_floor * np.linalg.eigvalsh(cov_t).max() + 1e-9 * np.abs(cov_t).max()
    elapsed = time.perf_counter() - t0
    ok = record(10, mean_err <= 1e-10 and cov_err <= bound and elapsed < 5,
                f"mean error {mean_err:.1e}, covariance error {cov_err:.1e} (bound {bound:.1e})")
    assert ok


def test_criterion_11_channel_sweep(synth):
    t0 = time.perf_counter()
    m = read_manifest(synth / "spectral_manifest.jsonl")
    waves = [read_waveform(m.resolve(e.audio)) for e in m.entries]
    rows = dict(channel_sweep(waves, [e.labels["material"] for e in m.entries],
                              [e.split == "train" for e in m.entries], (4, 40)))
    gap = 100 * (rows[40] - rows[4])
    elapsed = time.perf_counter() - t0
    ok = record(11, gap >= 15 and elapsed < 600, f"accuracy 4 bands {rows[4]:.3f}, 40 bands "
                f"{rows[40]:.3f}: gap {gap:.1f} points, {elapsed:.0f} s")
    assert ok


def _cli_outputs(synth, work, threads):
    """Run analyze, invert, predict, transfer and eval; return their output bytes."""
    work.mkdir()
    th = ["--threads", str(threads)]
    long_wav = synth / "long" / "long_004.wav"
    outs = {}
    assert main(["analyze", str(long_wav), str(work / "a.cgm"), *th]) == 0
    assert main(["invert", str(work / "a.cgm"), str(work / "i.wav"), *th]) == 0
    assert main(["train", str(synth / "manifest.jsonl"), str(work / "m.bin"), "--hidden-size",
                 "8", "--epochs", "1", *th]) == 0
    assert main(["predict", str(work / "m.bin"), str(synth / "manifest.jsonl"), str(work / "p"),
                 *th]) == 0
    assert main(["predict", str(work / "m.bin"), str(synth / "long" / "long_004.ftr"),
                 str(work / "long.cgm"), *th]) == 0
    assert main(["transfer", str(work / "a.cgm"), str(work / "db"), str(work / "t.wav"),
                 "--build-from", str(synth / "manifest.jsonl"), *th]) == 0
    assert main(["eval", str(synth / "manifest.jsonl"), str(work / "p"), "--out",
                 str(work / "report.json"), *th]) == 0
    for path in sorted(work.rglob("*")):
        if path.is_file():
            outs[str(path.relative_to(work))] = path.read_bytes()
    return outs


def test_criterion_12_determinism(synth, tmp_path, monkeypatch):
    monkeypatch.setenv("IMPACT_SEED", "0")
    t0 = time.perf_counter()
    runs = [_cli_outputs(synth, tmp_path / f"run{i}", th) for i, th in enumerate((1, 1, 4))]
    same = runs[0].keys() == runs[1].keys() == runs[2].keys()
    diff = sorted(k for k in runs[0] if not (runs[0][k] == runs[1].get(k) == runs[2].get(k)))
    elapsed = time.perf_counter() - t0
    ok = record(12, same and not diff,
                f"{len(runs[0])} output files byte-identical across 2 runs at 1 thread and 1 run "
                f"at 4 threads" if same and not diff else f"differing outputs: {diff[:5]}")
    assert ok
