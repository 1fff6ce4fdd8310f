"""Confidence-threshold rejection and the clean/adversarial error rates.

Everything is computed from per-sample decision logs (confidence, argmax,
label), so every reported number can be recomputed from the persisted logs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_is_fitted

LITERAL = "literal"
CAPPED = "capped"


def default_tau_grid(step=0.05):
    n = int(round(1.0 / step))
    return np.round(np.linspace(0.0, 1.0, n + 1), 10)


@dataclass(frozen=True)
class ThresholdedDecision:
    predicted: int  # class index, or n_classes for reject
    confidence: float
    argmax: int
    rejected: bool


def decide(proba, tau):
    """Thresholded decision for one probability vector.

    Returns the argmax class when the top probability reaches ``tau`` and the
    reject class (index ``K``) otherwise. Ties go to the lowest index.
    """
    p = np.asarray(proba, dtype=np.float64)
    k = int(np.argmax(p))
    conf = float(p[k])
    rejected = conf < tau
    return ThresholdedDecision(len(p) if rejected else k, conf, k, rejected)


def decide_batch(proba, tau):
    """Vectorised :func:`decide`: returns ``(predicted, confidence, argmax)``."""
    P = np.asarray(proba, dtype=np.float64)
    arg = P.argmax(axis=1)
    conf = P[np.arange(len(P)), arg]
    pred = np.where(conf < tau, P.shape[1], arg)
    return pred, conf, arg


def _proba(framework, X):
    if hasattr(framework, "predict_proba"):
        return framework.predict_proba(X)
    raise TypeError(f"{type(framework).__name__} has no predict_proba")


@dataclass
class DecisionLog:
    """Per-sample confidence, argmax class and true label for one sample set."""

    confidence: np.ndarray
    argmax: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.argmax = np.asarray(self.argmax, dtype=np.intp)
        self.labels = np.asarray(self.labels, dtype=np.intp)

    @classmethod
    def from_proba(cls, proba, labels):
        P = np.asarray(proba, dtype=np.float64)
        arg = P.argmax(axis=1)
        return cls(P[np.arange(len(P)), arg], arg, labels, P.shape[1])

    @classmethod
    def from_framework(cls, framework, X, y):
        return cls.from_proba(_proba(framework, X), y)

    def __len__(self):
        return len(self.labels)

    def _require_nonempty(self):
        if len(self) == 0:
            raise ValueError("error rates are undefined on an empty sample set")

    def rejected(self, tau):
        return self.confidence < tau

    @property
    def correct(self):
        return self.argmax == self.labels

    def error_clean(self, tau, mode=CAPPED):
        """Clean-set error counting misclassifications and wrongly rejected correct samples.

        ``literal`` sums both indicators, so a rejected sample whose argmax is
        right scores 2; ``capped`` takes their maximum so each sample counts
        at most once.
        """
        self._require_nonempty()
        rej = self.rejected(tau)
        wrong_decision = rej | ~self.correct  # the reject class never equals a label
        rejected_correct = rej & self.correct
        if mode == LITERAL:
            per_sample = wrong_decision.astype(float) + rejected_correct
        elif mode == CAPPED:
            per_sample = (wrong_decision | rejected_correct).astype(float)
        else:
            raise ValueError(f"mode must be {LITERAL!r} or {CAPPED!r}, got {mode!r}")
        return float(per_sample.mean())

    def error_adv(self, tau):
        """Fraction of adversaries that are misclassified and accepted."""
        self._require_nonempty()
        return float(np.mean(~self.correct & ~self.rejected(tau)))

    def rejection_rate(self, tau):
        self._require_nonempty()
        return float(np.mean(self.rejected(tau)))

    def misclassified(self):
        m = ~self.correct
        return DecisionLog(self.confidence[m], self.argmax[m], self.labels[m], self.n_classes)

    def restrict_correct(self):
        m = self.correct
        return DecisionLog(self.confidence[m], self.argmax[m], self.labels[m], self.n_classes)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "label", "argmax", "confidence"])
            for i, (lab, arg, conf) in enumerate(zip(self.labels, self.argmax, self.confidence)):
                w.writerow([i, int(lab), int(arg), repr(float(conf))])

    @classmethod
    def from_csv(cls, path, n_classes):
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        return cls(
            [float(r["confidence"]) for r in rows],
            [int(r["argmax"]) for r in rows],
            [int(r["label"]) for r in rows],
            n_classes,
        )


def error_clean(framework, X, y, tau, mode=CAPPED):
    return DecisionLog.from_framework(framework, X, y).error_clean(tau, mode)


def error_adv(framework, X_adv, y_true, tau):
    return DecisionLog.from_framework(framework, X_adv, y_true).error_adv(tau)


@dataclass
class ErrorReport:
    framework: str
    sample_set: str
    metric: str  # "E_D" or "E_A"
    taus: np.ndarray
    errors: np.ndarray
    rejection_rates: np.ndarray
    extra: dict = field(default_factory=dict)  # e.g. literal E_D column

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=np.float64)
        if np.any(np.diff(self.taus) <= 0):
            raise ValueError("threshold grid must be strictly increasing")

    def rows(self):
        for i, tau in enumerate(self.taus):
            row = {"tau": float(tau), self.metric: float(self.errors[i]), "rejection_rate": float(self.rejection_rates[i])}
            row.update({k: float(v[i]) for k, v in self.extra.items()})
            yield row

    def to_csv(self, path):
        rows = list(self.rows())
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            for row in rows:
                w.writerow({k: f"{v:.6f}" for k, v in row.items()})


def _check_grid(taus):
    taus = np.asarray(taus if taus is not None else default_tau_grid(), dtype=np.float64)
    if np.any(np.diff(taus) <= 0):
        raise ValueError("threshold grid must be strictly increasing")
    return taus


def sweep_logs(name, clean_log, adv_logs, taus=None, mode=CAPPED):
    """Error reports for one framework from already computed decision logs."""
    taus = _check_grid(taus)
    reports = [
        ErrorReport(
            name,
            "clean",
            "E_D",
            taus,
            [clean_log.error_clean(t, mode) for t in taus],
            [clean_log.rejection_rate(t) for t in taus],
            {"E_D_literal": [clean_log.error_clean(t, LITERAL) for t in taus],
             "E_D_capped": [clean_log.error_clean(t, CAPPED) for t in taus]},
        )
    ]
    for set_name, log in adv_logs.items():
        if len(log) == 0:
            continue
        reports.append(
            ErrorReport(
                name,
                set_name,
                "E_A",
                taus,
                [log.error_adv(t) for t in taus],
                [log.rejection_rate(t) for t in taus],
            )
        )
    return reports


def sweep(framework, clean, adversaries, taus=None, name=None, mode=CAPPED):
    """E_D on ``clean=(X, y)`` and E_A on each ``adversaries[name] = (X, y)``, per threshold."""
    name = name or type(framework).__name__
    clean_log = DecisionLog.from_framework(framework, *clean)
    adv_logs = {k: DecisionLog.from_framework(framework, *v) for k, v in adversaries.items()}
    return sweep_logs(name, clean_log, adv_logs, taus, mode)


@dataclass
class DensityHistogram:
    edges: np.ndarray
    densities: dict
    counts: dict

    def to_csv(self, path):
        names = list(self.densities)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_low", "bin_high", *names])
            for i in range(len(self.edges) - 1):
                w.writerow(
                    [f"{self.edges[i]:.4f}", f"{self.edges[i + 1]:.4f}"]
                    + [f"{self.densities[n][i]:.6f}" for n in names]
                )


def histogram(confidences, bins=20):
    """Probability mass per equal-width bin on [0, 1] (last bin right-closed).

    Returns ``(edges, mass, empty)``; an empty input gives all-zero mass.
    """
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.clip(confidences, 0.0, 1.0), bins=edges)
    total = counts.sum()
    if total == 0:
        return edges, np.zeros(bins), True
    return edges, counts / total, False


def density_from_logs(logs, bins=20):
    densities, counts = {}, {}
    edges = np.linspace(0.0, 1.0, bins + 1)
    for name, log in logs.items():
        edges, mass, _ = histogram(log.confidence, bins)
        densities[name] = mass
        counts[name] = len(log)
    return DensityHistogram(edges, densities, counts)


def density_logs(clean_log, adv_logs):
    """Sets plotted in the density figures: correctly classified clean samples,
    every adversary set, and each set's misclassified subset."""
    logs = {"clean-correct": clean_log.restrict_correct()}
    for name, log in adv_logs.items():
        logs[name] = log
        logs[f"{name}-misclassified"] = log.misclassified()
    return logs


def confidence_density(framework, clean, adversaries, bins=20):
    clean_log = DecisionLog.from_framework(framework, *clean)
    adv_logs = {k: DecisionLog.from_framework(framework, *v) for k, v in adversaries.items()}
    return density_from_logs(density_logs(clean_log, adv_logs), bins)


def rejection_rate_curve(framework, X, taus=None):
    """``(tau, fraction with confidence < tau)`` rows."""
    taus = _check_grid(taus)
    conf = np.asarray(_proba(framework, X)).max(axis=1)
    if len(conf) == 0:
        raise ValueError("empty sample set")
    return [(float(t), float(np.mean(conf < t))) for t in taus]


class RejectionClassifier(ClassifierMixin, BaseEstimator):
    """Wrap a probabilistic classifier with a confidence threshold.

    ``predict`` returns ``n_classes`` (one past the last class) for rejected
    inputs. Set ``prefit=True`` to wrap an estimator that is already trained.
    """

    def __init__(self, estimator, threshold=0.5, prefit=False):
        self.estimator = estimator
        self.threshold = threshold
        self.prefit = prefit

    def fit(self, X, y):
        if self.prefit:
            self.estimator_ = self.estimator
        else:
            self.estimator_ = clone(self.estimator).fit(X, y)
        self.classes_ = np.asarray(self.estimator_.classes_)
        self.reject_label_ = len(self.classes_)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "estimator_")
        return self.estimator_.predict_proba(X)

    def predict(self, X):
        pred, _, _ = decide_batch(self.predict_proba(X), self.threshold)
        return pred

    def rejection_rate(self, X):
        return float(np.mean(self.predict(X) == self.reject_label_))
