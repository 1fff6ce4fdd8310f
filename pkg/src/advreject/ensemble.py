"""Specialists+1 ensemble: confusion-driven class subsets and agreement voting."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels
from .attacks import fgs, tune_epsilon
from .nn import NeuralNetClassifier

logger = logging.getLogger(__name__)

CONFUSING = "confusing"
COMPLEMENT = "complement"
GENERALIST = "generalist"


# -- confusion matrices ------------------------------------------------------


def confusion_counts(true_labels, predicted, n_classes):
    """``K x K`` integer counts; rows are true classes, columns predictions."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true_labels, dtype=np.intp), np.asarray(predicted, dtype=np.intp)), 1)
    return cm


def build_confusion_matrix(source, X, y, per_class_count=500, epsilon=None, target_fool_rate=1.0, seed=0):
    """Adversarial confusion matrix from FGS adversaries of training samples.

    For each class, ``per_class_count`` samples the source network classifies
    correctly are drawn without replacement; only adversaries that fool the
    source are counted. ``epsilon=None`` tunes FGS on the drawn samples.
    Returns ``(matrix, epsilon)``.
    """
    net = source.network_ if hasattr(source, "network_") else source
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.intp)
    k = net.n_classes
    correct = net.predict(X) == y
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(k):
        pool = np.flatnonzero(correct & (y == c))
        if len(pool) == 0:
            raise ValueError(f"class {c} has no correctly classified samples to attack")
        if len(pool) < per_class_count:
            warnings.warn(
                f"class {c}: only {len(pool)} eligible samples (< {per_class_count}); using all",
                RuntimeWarning,
                stacklevel=2,
            )
        chosen.append(rng.choice(pool, size=min(per_class_count, len(pool)), replace=False))
    idx = np.sort(np.concatenate(chosen))
    Xs, ys = X[idx], y[idx]
    if epsilon is None:
        epsilon, _ = tune_epsilon(net, Xs, ys, target_fool_rate)
    pred = net.predict(fgs(net, Xs, ys, epsilon))
    fooled = pred != ys
    return confusion_counts(ys[fooled], pred[fooled], k), epsilon


# -- subsets -----------------------------------------------------------------


@dataclass(frozen=True)
class ClassSubset:
    classes: tuple
    origin: str
    row: int | None = None

    def __post_init__(self):
        if not self.classes:
            raise ValueError("class subsets must be nonempty")
        object.__setattr__(self, "classes", tuple(sorted(int(c) for c in self.classes)))

    def __contains__(self, c):
        return c in self.classes

    def __len__(self):
        return len(self.classes)

    def to_dict(self):
        d = {"origin": self.origin, "classes": list(self.classes)}
        if self.row is not None:
            d["row"] = self.row
        return d


@dataclass
class EnsembleSpec:
    n_classes: int
    subsets: list
    coverage: float = 0.8
    duplicates_removed: int = 0
    expected_votes: np.ndarray = field(init=False)

    def __post_init__(self):
        for s in self.subsets:
            if any(c < 0 or c >= self.n_classes for c in s.classes):
                raise ValueError(f"subset {s.classes} has classes outside [0, {self.n_classes})")
        self.expected_votes = expected_votes(self.subsets, self.n_classes)

    def __len__(self):
        return len(self.subsets)

    def to_dict(self):
        return {
            "K": self.n_classes,
            "coverage": self.coverage,
            "duplicates_removed": self.duplicates_removed,
            "subsets": [s.to_dict() for s in self.subsets],
        }

    @classmethod
    def from_dict(cls, d):
        subsets = [ClassSubset(tuple(s["classes"]), s["origin"], s.get("row")) for s in d["subsets"]]
        return cls(d["K"], subsets, d.get("coverage", 0.8), d.get("duplicates_removed", 0))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def expected_votes(subsets, n_classes):
    """``m_k``: how many subsets contain class ``k``."""
    m = np.zeros(n_classes, dtype=np.int64)
    for s in subsets:
        m[list(s.classes)] += 1
    return m


def confusing_subset(row, i, coverage=0.8):
    """Shortest prefix of classes, by descending confusion (ties: lower index),
    covering at least ``coverage`` of row ``i``'s off-diagonal mass."""
    row = np.asarray(row, dtype=np.float64).copy()
    row[i] = 0.0
    total = row.sum()
    if total <= 0:
        raise ValueError(f"row {i} has no off-diagonal confusions")
    order = sorted((c for c in range(len(row)) if c != i), key=lambda c: (-row[c], c))
    picked = []
    acc = 0.0
    for c in order:
        picked.append(c)
        acc += row[c]
        if acc >= coverage * total:
            break
    return tuple(picked)


def candidate_subsets(cm, coverage=0.8):
    """All ``2K + 1`` subsets before duplicate removal, in order
    ``U_1..U_K, U_{K+1}..U_{2K}, U_{2K+1}``."""
    cm = np.asarray(cm)
    k = cm.shape[0]
    if cm.shape != (k, k):
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    everything = set(range(k))
    confusing = [ClassSubset(confusing_subset(cm[i], i, coverage), CONFUSING, i) for i in range(k)]
    complements = [ClassSubset(tuple(everything - set(u.classes)), COMPLEMENT, u.row) for u in confusing]
    return confusing + complements + [ClassSubset(tuple(range(k)), GENERALIST)]


def derive_subsets(cm, coverage=0.8):
    """Build the deduplicated :class:`EnsembleSpec` from an adversarial confusion matrix."""
    k = np.asarray(cm).shape[0]
    seen = set()
    kept = []
    for s in candidate_subsets(cm, coverage):
        if s.classes in seen:
            continue
        seen.add(s.classes)
        kept.append(s)
    dropped = 2 * k + 1 - len(kept)
    if dropped:
        logger.warning("%d duplicate class subsets removed", dropped)
    return EnsembleSpec(k, kept, coverage, dropped)


# -- voting ------------------------------------------------------------------


@dataclass
class VoteResult:
    votes: np.ndarray  # (n, K)
    winner: np.ndarray  # (n,)
    agreement: np.ndarray  # (n,) bool
    activated: np.ndarray  # (n, M) bool
    fused: np.ndarray  # (n, K)

    @property
    def confidence(self):
        return self.fused.max(axis=-1)

    def __getitem__(self, i):
        return VoteResult(self.votes[i], self.winner[i], self.agreement[i], self.activated[i], self.fused[i])


def vote(member_probs, subsets, n_classes=None):
    """Agreement voting over member outputs.

    ``member_probs`` has shape ``(M, K)`` for one input or ``(M, n, K)`` for a
    batch, ordered like ``subsets``. Each member votes for its argmax (lowest
    index on ties); the winner (lowest index on ties) triggers the agreement
    branch when it collects all ``m_k`` votes it can get, in which case only
    the members whose subset contains it are averaged. Otherwise every member
    is averaged.
    """
    P = np.asarray(member_probs, dtype=np.float64)
    single = P.ndim == 2
    if single:
        P = P[:, None, :]
    m_members, n, k = P.shape
    if n_classes is not None and k != n_classes:
        raise ValueError(f"members emit {k} classes, expected {n_classes}")
    if len(subsets) != m_members:
        raise ValueError(f"{m_members} member outputs for {len(subsets)} subsets")
    membership = np.zeros((m_members, k), dtype=bool)
    for j, s in enumerate(subsets):
        membership[j, list(s.classes)] = True
    m = membership.sum(axis=0)

    choice = P.argmax(axis=2)  # (M, n)
    votes = np.zeros((n, k), dtype=np.int64)
    for j in range(m_members):
        votes[np.arange(n), choice[j]] += 1
    winner = votes.argmax(axis=1)
    agreement = votes[np.arange(n), winner] == m[winner]
    activated = np.where(agreement[:, None], membership[:, winner].T, True)
    weights = activated / activated.sum(axis=1, keepdims=True)
    fused = np.einsum("nm,mnk->nk", weights, P)
    res = VoteResult(votes, winner, agreement, activated, fused)
    return res[0] if single else res


# -- member estimators ---------------------------------------------------------


def _default_estimator():
    return NeuralNetClassifier()


class SpecialistClassifier(ClassifierMixin, BaseEstimator):
    """Network trained only on the classes of one subset.

    Its softmax spans the subset; ``predict_proba`` embeds that into a
    ``n_classes`` vector that is zero outside the subset.
    """

    def __init__(self, estimator=None, classes=(0,), n_classes=2):
        self.estimator = estimator
        self.classes = classes
        self.n_classes = n_classes

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X), self.n_classes)
        subset = np.array(sorted(set(int(c) for c in self.classes)), dtype=np.intp)
        if len(subset) == 0:
            raise ValueError("specialist subset must be nonempty")
        mask = np.isin(y, subset)
        for c in subset:
            if not np.any(y == c):
                raise ValueError(f"subset class {c} has no training samples")
        local = np.searchsorted(subset, y[mask])
        est = clone(self.estimator if self.estimator is not None else _default_estimator())
        est.set_params(n_classes=len(subset))
        est.fit(X[mask], local)
        self.estimator_ = est
        self.subset_ = subset
        self.classes_ = np.arange(self.n_classes)
        return self

    @classmethod
    def from_network(cls, network, classes, n_classes):
        sp = cls(None, tuple(classes), n_classes)
        sp.estimator_ = NeuralNetClassifier.from_network(network)
        sp.subset_ = np.array(sorted(classes), dtype=np.intp)
        sp.classes_ = np.arange(n_classes)
        return sp

    @property
    def network_(self):
        return self.estimator_.network_

    def predict_proba(self, X):
        check_is_fitted(self, "estimator_")
        local = self.estimator_.predict_proba(X)
        out = np.zeros((len(local), self.n_classes))
        out[:, self.subset_] = local
        return out

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


class SpecialistsEnsembleClassifier(ClassifierMixin, BaseEstimator):
    """Specialists+1 ensemble.

    ``fit`` trains the generalist, attacks its training set with FGS to get
    the adversarial confusion matrix, derives the class subsets and trains one
    specialist per subset. Pass ``spec`` to skip the confusion stage.

    Parameters
    ----------
    estimator : NeuralNetClassifier, default=None
        Template for every member; cloned with per-member seeds.
    coverage : float, default=0.8
        Fraction of each row's confusions the confusing subset must cover.
    per_class_count : int, default=500
        FGS training adversaries drawn per class for the confusion matrix.
    epsilon : float, default=None
        FGS step for the confusion matrix; tuned to ``target_fool_rate`` when None.
    random_state : int, default=0
        Member built from candidate subset ``j`` is seeded ``random_state + j``.
    spec : EnsembleSpec, default=None
        Precomputed subsets.
    """

    def __init__(
        self,
        estimator=None,
        coverage=0.8,
        per_class_count=500,
        epsilon=None,
        target_fool_rate=1.0,
        random_state=0,
        spec=None,
    ):
        self.estimator = estimator
        self.coverage = coverage
        self.per_class_count = per_class_count
        self.epsilon = epsilon
        self.target_fool_rate = target_fool_rate
        self.random_state = random_state
        self.spec = spec

    def _member(self, subset, k, seed):
        est = clone(self.estimator if self.estimator is not None else _default_estimator())
        est.set_params(random_state=seed)
        return SpecialistClassifier(est, subset.classes, k)

    def _seed(self, subset, k):
        if subset.origin == GENERALIST:
            return self.random_state + 2 * k
        return self.random_state + subset.row + (k if subset.origin == COMPLEMENT else 0)

    def fit(self, X, y, n_classes=None):
        X = check_images(X)
        y = check_labels(y, len(X))
        k = int(n_classes or (self.spec.n_classes if self.spec is not None else y.max() + 1))
        generalist_subset = ClassSubset(tuple(range(k)), GENERALIST)
        generalist = self._member(generalist_subset, k, self._seed(generalist_subset, k)).fit(X, y)
        if self.spec is None:
            self.confusion_matrix_, self.epsilon_ = build_confusion_matrix(
                generalist.network_, X, y, self.per_class_count, self.epsilon, self.target_fool_rate,
                seed=self.random_state,
            )
            self.spec_ = derive_subsets(self.confusion_matrix_, self.coverage)
        else:
            self.spec_ = self.spec
        members = []
        for s in self.spec_.subsets:
            if s.origin == GENERALIST:
                members.append(generalist)
            else:
                logger.info("training specialist %s %s", s.origin, s.classes)
                members.append(self._member(s, k, self._seed(s, k)).fit(X, y))
        self.members_ = members
        self.classes_ = np.arange(k)
        self.n_classes_ = k
        return self

    @classmethod
    def from_members(cls, spec, networks):
        ens = cls(spec=spec)
        ens.spec_ = spec
        ens.members_ = [SpecialistClassifier.from_network(net, s.classes, spec.n_classes)
                        for s, net in zip(spec.subsets, networks)]
        ens.classes_ = np.arange(spec.n_classes)
        ens.n_classes_ = spec.n_classes
        return ens

    def member_proba(self, X):
        check_is_fitted(self, "members_")
        return np.stack([m.predict_proba(X) for m in self.members_])

    def vote(self, X):
        return vote(self.member_proba(X), self.spec_.subsets, self.n_classes_)

    def predict_proba(self, X):
        return self.vote(X).fused

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


class PureEnsembleClassifier(ClassifierMixin, BaseEstimator):
    """Generalists that differ only in their seed, fused by averaging probabilities."""

    def __init__(self, estimator=None, n_members=5, seeds=None):
        self.estimator = estimator
        self.n_members = n_members
        self.seeds = seeds

    def _seeds(self):
        seeds = list(self.seeds) if self.seeds is not None else list(range(self.n_members))
        if len(set(seeds)) != len(seeds):
            warnings.warn(f"duplicate member seeds {seeds}", RuntimeWarning, stacklevel=3)
        return seeds

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        members = []
        for s in self._seeds():
            est = clone(self.estimator if self.estimator is not None else _default_estimator())
            est.set_params(random_state=s)
            members.append(est.fit(X, y))
        self.members_ = members
        self.n_classes_ = members[0].n_classes_
        self.classes_ = np.arange(self.n_classes_)
        return self

    @classmethod
    def from_networks(cls, networks):
        ens = cls(n_members=len(networks))
        ens.members_ = [NeuralNetClassifier.from_network(n) for n in networks]
        ens.n_classes_ = networks[0].n_classes
        ens.classes_ = np.arange(ens.n_classes_)
        return ens

    def predict_proba(self, X):
        check_is_fitted(self, "members_")
        return np.mean([m.predict_proba(X) for m in self.members_], axis=0)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)
