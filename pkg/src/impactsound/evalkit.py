"""Evaluation: auditory metrics, detection AP, and linear sound classification."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cochlea import Cochleagram, build_filterbank, subband_envelopes
from .onset import OnsetList
from .signal_io import Waveform

log = logging.getLogger(__name__)

SOFT_MATERIALS = ("leaf", "grass", "cloth", "plastic bag", "carpet")
HARD_MATERIALS = ("gravel", "rock", "tile", "wood", "ceramic", "plastic", "drywall", "glass",
                  "metal")
HARDNESS = {**{m: "soft" for m in SOFT_MATERIALS}, **{m: "hard" for m in HARD_MATERIALS}}
DEFAULT_SWEEP = (4, 8, 16, 32, 40, 64)


# --------------------------------------------------------- auditory metrics

def loudness(coch: Cochleagram) -> float:
    """Largest per-frame L2 norm of the compressed envelopes."""
    env = coch.compressed().env
    if env.shape[0] == 0:
        return 0.0
    return float(np.max(np.linalg.norm(env, axis=1)))


def spectral_centroid(coch: Cochleagram, center_time: float | None = None, *,
                      center_index: int | None = None, window_seconds: float = 1.0 / 30) -> float:
    """Channel-index centre of mass over a short window around an impact.

    The window holds the frames within ``window_seconds / 2`` of the centre
    (three frames at 90 Hz). Channels are weighted by their linear
    (decompressed) envelope amplitude. Returns ``nan`` when the window has
    no energy.
    """
    env = coch.linear_envelopes()
    if center_index is None:
        if center_time is None:
            raise ValueError("give center_time or center_index")
        center_index = int(round(center_time * coch.env_rate))
    if not 0 <= center_index < env.shape[0]:
        raise ValueError("centre lies outside the cochleagram")
    half = int(round(0.5 * window_seconds * coch.env_rate))
    profile = env[max(0, center_index - half):center_index + half + 1].sum(axis=0)
    total = profile.sum()
    if total <= 0:
        return float("nan")
    return float(np.arange(env.shape[1]) @ profile / total)


# ------------------------------------------------------------ detection AP

def match_detections(times, confidences, truths, tol: float = 0.1) -> np.ndarray:
    """Hit flags of predictions ranked by descending confidence.

    Each prediction takes the nearest still-unmatched truth within ``tol``;
    confidence ties are ranked by time.
    """
    times = np.asarray(times, dtype=np.float64)
    order = np.lexsort((times, -np.asarray(confidences, dtype=np.float64)))
    truths = np.asarray(truths, dtype=np.float64)
    free = np.ones(truths.size, dtype=bool)
    hits = np.zeros(order.size, dtype=bool)
    for rank, i in enumerate(order):
        if not free.any():
            break
        d = np.where(free, np.abs(truths - times[i]), np.inf)
        j = int(np.argmin(d))
        if d[j] <= tol:
            free[j] = False
            hits[rank] = True
    return hits


def average_precision(hits, n_truth: int) -> float:
    """Step-wise area under the precision-recall curve of a ranked hit list."""
    if n_truth <= 0:
        raise ValueError("average precision is undefined without ground truth")
    hits = np.asarray(hits, dtype=bool)
    if hits.size == 0:
        return 0.0
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(np.sum(precision[hits]) / n_truth)


def detection_ap(predicted, truths, tol: float = 0.1) -> float:
    """AP of predicted onsets (an :class:`OnsetList` or ``(times, confidences)``)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    times, conf = _unpack(predicted)
    truths = np.asarray(truths, dtype=np.float64).reshape(-1)
    return average_precision(match_detections(times, conf, truths, tol), truths.size)


def pooled_detection_ap(pairs, tol: float = 0.1) -> float:
    """AP over several recordings: matching per recording, one global ranking."""
    conf_all, hit_all, n_truth = [], [], 0
    for predicted, truths in pairs:
        times, conf = _unpack(predicted)
        truths = np.asarray(truths, dtype=np.float64).reshape(-1)
        order = np.lexsort((times, -conf))
        hit_all.append(match_detections(times, conf, truths, tol))
        conf_all.append(conf[order])
        n_truth += truths.size
    conf = np.concatenate(conf_all) if conf_all else np.zeros(0)
    hits = np.concatenate(hit_all) if hit_all else np.zeros(0, dtype=bool)
    order = np.argsort(-conf, kind="stable")
    return average_precision(hits[order], n_truth)


def _unpack(predicted):
    if isinstance(predicted, OnsetList):
        return predicted.times, predicted.confidences
    times, conf = predicted
    return np.asarray(times, dtype=np.float64), np.asarray(conf, dtype=np.float64)


# ------------------------------------------------------------- classifier

def balance_classes(y, per_class_cap: int | None = None, rng=None) -> np.ndarray:
    """Indices resampling every class to the same count.

    The count is ``per_class_cap`` if given, else the smallest class size.
    Classes larger than the count are subsampled, smaller ones drawn with
    replacement.
    """
    rng = np.random.default_rng(rng)
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    cap = int(per_class_cap) if per_class_cap else int(counts.min())
    idx = []
    for c in classes:
        members = np.flatnonzero(y == c)
        idx.append(rng.choice(members, size=cap, replace=cap > members.size))
    return np.sort(np.concatenate(idx))


class LinearSVMClassifier(ClassifierMixin, BaseEstimator):
    """One-vs-rest linear SVM (squared hinge, L2 penalty) with class balancing.

    Features are standardised internally; ``coef_`` and ``intercept_`` are
    folded back to the raw feature space so the decision rule stays linear
    in the inputs. Ties in the arg-max go to the lowest class index.
    """

    def __init__(self, alpha=1e-3, per_class_cap=None, balance=True, classes=None, max_iter=500,
                 tol=1e-8, random_state=0):
        self.alpha = alpha
        self.classes = classes
        self.per_class_cap = per_class_cap
        self.balance = balance
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if self.classes is not None:
            missing = sorted(set(self.classes) - set(self.classes_.tolist()))
            if missing:
                raise ValueError(f"no training samples for classes {missing}")
            self.classes_ = np.asarray(list(self.classes))
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        if self.balance:
            keep = balance_classes(y, self.per_class_cap, self.random_state)
            X, y = X[keep], y[keep]
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        Z = (X - mean) / scale
        n, d = Z.shape
        L = self.classes_.size
        Yb = np.where(y[:, None] == self.classes_[None, :], 1.0, -1.0)
        Za = np.hstack([Z, np.ones((n, 1))])

        def objective(theta):
            Wb = theta.reshape(L, d + 1)
            margin = 1.0 - Yb * (Za @ Wb.T)
            active = np.maximum(margin, 0.0)
            W = Wb[:, :d]
            value = np.sum(active ** 2) / n + 0.5 * self.alpha * np.sum(W ** 2)
            grad = -2.0 / n * (Yb * active).T @ Za
            grad[:, :d] += self.alpha * W
            return value, grad.ravel()

        res = minimize(objective, np.zeros(L * (d + 1)), jac=True, method="L-BFGS-B",
                       options={"maxiter": self.max_iter, "gtol": self.tol, "ftol": 1e-12})
        Wb = res.x.reshape(L, d + 1)
        self.coef_ = Wb[:, :d] / scale
        self.intercept_ = Wb[:, d] - self.coef_ @ mean
        self.n_iter_ = res.nit
        self.n_features_in_ = d
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_.T + self.intercept_

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def predict_proba(self, X):
        """Softmax over the one-vs-rest margins."""
        s = self.decision_function(X)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        return s / s.sum(axis=1, keepdims=True)


def train_classifier(features, labels, per_class_cap: int | None = None,
                     **kwargs) -> LinearSVMClassifier:
    return LinearSVMClassifier(per_class_cap=per_class_cap, **kwargs).fit(features, labels)


def classify(clf: LinearSVMClassifier, feature):
    return clf.predict(np.atleast_2d(feature))[0]


def class_averaged_accuracy(predictions, truths) -> float:
    """Mean over the classes present in ``truths`` of per-class recall."""
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    classes = np.unique(truths)
    if classes.size == 0:
        raise ValueError("no ground-truth labels")
    return float(np.mean([np.mean(predictions[truths == c] == c) for c in classes]))


@dataclass(frozen=True)
class ConfusionMatrix:
    rows: np.ndarray  # (L, L); row = true class
    labels: tuple
    soft: bool = True

    def reordered(self, order) -> "ConfusionMatrix":
        order = list(order)
        return ConfusionMatrix(self.rows[np.ix_(order, order)],
                               tuple(self.labels[i] for i in order), self.soft)


def confusion_soft(clf: LinearSVMClassifier, X, y) -> ConfusionMatrix:
    """Row ``c`` = mean predicted class probabilities over test samples of class ``c``."""
    proba = clf.predict_proba(X)
    y = np.asarray(y)
    rows = np.zeros((clf.classes_.size, clf.classes_.size))
    for i, c in enumerate(clf.classes_):
        members = y == c
        if not members.any():
            raise ValueError(f"no test samples of class {c!r}")
        rows[i] = proba[members].mean(axis=0)
    return ConfusionMatrix(rows, tuple(clf.classes_.tolist()), True)


def confusion_counts(predictions, truths, labels) -> ConfusionMatrix:
    index = {c: i for i, c in enumerate(labels)}
    rows = np.zeros((len(labels), len(labels)))
    for p, t in zip(predictions, truths):
        rows[index[t], index[p]] += 1
    return ConfusionMatrix(rows, tuple(labels), False)


def order_classes(conf: ConfusionMatrix | np.ndarray) -> list:
    """Greedy chain through classes: start at class 0, then repeatedly append
    the unvisited class whose row is nearest (L2) to the last one chosen."""
    rows = conf.rows if isinstance(conf, ConfusionMatrix) else np.asarray(conf, dtype=np.float64)
    L = rows.shape[0]
    order = [0]
    left = list(range(1, L))
    while left:
        d = [np.linalg.norm(rows[j] - rows[order[-1]]) for j in left]
        order.append(left.pop(int(np.argmin(d))))
    return order


# ---------------------------------------------------------- protocol runs

def clip_features(coch: Cochleagram, n_frames: int | None = None) -> np.ndarray:
    """Flattened compressed cochleagram (frame-major), cropped/zero-padded to ``n_frames``."""
    env = coch.compressed().env
    if n_frames is not None:
        out = np.zeros((n_frames, env.shape[1]))
        m = min(n_frames, env.shape[0])
        out[:m] = env[:m]
        env = out
    return env.ravel()


def classify_predictions_protocol(clf: LinearSVMClassifier, predicted: list, truths,
                                  n_frames: int | None = None) -> float:
    """Class-averaged accuracy of a real-sound classifier on predicted cochleagrams.

    ``clf`` must have been trained on real sound features only.
    """
    X = np.stack([clip_features(c, n_frames) for c in predicted])
    return class_averaged_accuracy(clf.predict(X), truths)


def channel_sweep(waves, labels, is_train, n_bands=DEFAULT_SWEEP, *, low_hz: float = 20.0,
                  high_hz: float | None = None, env_rate: float = 90.0, compression: float = 0.3,
                  per_class_cap: int | None = None, seed: int = 0, threads: int = 1) -> list:
    """Real-sound classification accuracy as a function of band-pass count.

    Returns ``[(n_band, class_averaged_accuracy), ...]`` in input order.
    """
    waves = list(waves)
    labels = np.asarray(labels)
    is_train = np.asarray(is_train, dtype=bool)
    n_frames = min(int(round(len(w) * env_rate / w.sample_rate)) for w in waves)

    def run(n_band):
        fb = build_filterbank(waves[0].sample_rate, n_band, low_hz, high_hz)
        X = np.stack([clip_features(subband_envelopes(w, fb, env_rate, compression), n_frames)
                      for w in waves])
        clf = train_classifier(X[is_train], labels[is_train], per_class_cap, random_state=seed)
        acc = class_averaged_accuracy(clf.predict(X[~is_train]), labels[~is_train])
        log.info("n_band=%d accuracy=%.4f", n_band, acc)
        return int(n_band), acc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(run, n_bands))
    return [run(n) for n in n_bands]


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n_band", "accuracy"])
    for n_band, acc in rows:
        writer.writerow([n_band, f"{acc:.6f}"])
    return buf.getvalue()


def _pearson(a, b) -> float | None:
    a, b = np.asarray(a, float), np.asarray(b, float)
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < 2 or np.std(a[ok]) == 0 or np.std(b[ok]) == 0:
        return None
    return float(np.corrcoef(a[ok], b[ok])[0, 1])


def metric_report(predicted: list, real: list, centers=None, detection_pairs=None,
                  class_avg_acc: float | None = None, tol: float = 0.1) -> dict:
    """Loudness / centroid errors and correlations, detection AP and class accuracy.

    ``centers`` gives each clip's impact time in seconds (default: middle).
    ``*_err`` is the mean squared error, ``*_mae`` the mean absolute error,
    ``*_r`` the Pearson correlation across clips.
    """
    lp = np.array([loudness(c) for c in predicted])
    lt = np.array([loudness(c) for c in real])
    if centers is None:
        centers = [0.5 * c.duration for c in real]
    cp, ct = [], []
    for p, t, centre in zip(predicted, real, centers):
        ct.append(spectral_centroid(t, center_index=min(int(round(centre * t.env_rate)), t.n_frames - 1)))
        cp.append(spectral_centroid(p, center_index=min(int(round(centre * p.env_rate)), p.n_frames - 1)))
    cp, ct = np.array(cp), np.array(ct)
    ok = np.isfinite(cp) & np.isfinite(ct)

    def mse(a, b):
        return float(np.mean((a - b) ** 2)) if a.size else None

    def mae(a, b):
        return float(np.mean(np.abs(a - b))) if a.size else None

    report = {
        "loudness_err": mse(lp, lt), "loudness_mae": mae(lp, lt), "loudness_r": _pearson(lp, lt),
        "centroid_err": mse(cp[ok], ct[ok]), "centroid_mae": mae(cp[ok], ct[ok]),
        "centroid_r": _pearson(cp, ct),
        "detection_ap": None, "class_avg_acc": class_avg_acc,
    }
    if detection_pairs:
        report["detection_ap"] = pooled_detection_ap(detection_pairs, tol)
    return report
