import itertools

import numpy as np
import pytest

from advreject.ensemble import (
    ClassSubset,
    EnsembleSpec,
    PureEnsembleClassifier,
    SpecialistClassifier,
    SpecialistsEnsembleClassifier,
    build_confusion_matrix,
    candidate_subsets,
    confusing_subset,
    confusion_counts,
    derive_subsets,
    expected_votes,
    vote,
)
from advreject.nn import NeuralNetClassifier
from oracles import brute_force_confusing_subset, reference_vote

MLP = [{"kind": "dense", "units": 12}, {"kind": "relu"}]


def small_estimator(**kw):
    params = dict(layers=MLP, epochs=25, batch_size=16, decay_epochs=(15, 20), random_state=0)
    params.update(kw)
    return NeuralNetClassifier(**params)


def random_confusion(rng, k):
    cm = rng.integers(0, 6, size=(k, k)) * rng.integers(0, 2, size=(k, k))
    np.fill_diagonal(cm, rng.integers(0, 3, size=k))
    for i in range(k):
        if cm[i].sum() - cm[i, i] == 0:
            cm[i, (i + 1) % k] = 1
    return cm


def family(classes_list, k):
    return [ClassSubset(tuple(c), "confusing", i) for i, c in enumerate(classes_list)]


# confusing {1},{2},{0}; complements; generalist. Every class appears 4 times.
FAMILY_A = [(1,), (2,), (0,), (0, 2), (0, 1), (1, 2), (0, 1, 2)]
FAMILY_B = [(1, 2), (0, 2), (0, 1), (0,), (1,), (2,), (0, 1, 2)]


@pytest.fixture(scope="module")
def blobs():
    rng = np.random.default_rng(0)
    k = 4
    centers = rng.uniform(0.2, 0.8, size=(k, 6))
    y = np.repeat(np.arange(k), 40)
    X = np.clip(centers[y] + 0.04 * rng.normal(size=(len(y), 6)), 0, 1)
    return X, y, k


class TestSubsetRule:
    def test_single_target_row(self):
        cm = np.array([[0, 7], [3, 0]])
        assert confusing_subset(cm[0], 0) == (1,)
        spec_pre = candidate_subsets(cm)
        assert spec_pre[2].classes == (0,)

    def test_fifty_thirty_twenty(self):
        row = np.array([0, 50, 30, 20])
        assert sorted(confusing_subset(row, 0)) == [1, 2]
        subsets = candidate_subsets(np.array([row, [1, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0]]))
        assert subsets[0].classes == (1, 2)
        assert subsets[4].classes == (0, 3)

    def test_diagonal_is_ignored(self):
        row = np.array([1000, 10, 0, 0])
        assert confusing_subset(row, 0) == (1,)

    def test_ties_go_to_lower_index(self):
        assert confusing_subset(np.array([0, 5, 5, 5, 5]), 0) == (1, 2, 3, 4)
        assert confusing_subset(np.array([0, 5, 5, 5, 5]), 0, coverage=0.5) == (1, 2)

    def test_prefix_is_shortest(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            k = int(rng.integers(3, 8))
            cm = random_confusion(rng, k)
            for i in range(k):
                picked = confusing_subset(cm[i], i)
                total = cm[i].sum() - cm[i, i]
                assert sum(cm[i, c] for c in picked) >= 0.8 * total
                assert sum(cm[i, c] for c in picked[:-1]) < 0.8 * total

    def test_row_without_confusions(self):
        with pytest.raises(ValueError):
            confusing_subset(np.array([5, 0, 0]), 0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            k = int(rng.choice([3, 4, 10]))
            cm = random_confusion(rng, k)
            for i in range(k):
                assert tuple(sorted(confusing_subset(cm[i], i))) == brute_force_confusing_subset(cm[i], i)

    def test_pre_dedup_counts(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            k = int(rng.choice([3, 4, 10]))
            subsets = candidate_subsets(random_confusion(rng, k))
            assert len(subsets) == 2 * k + 1
            counts = np.zeros(k, dtype=int)
            for s in subsets:
                for c in s.classes:
                    counts[c] += 1
            assert np.all(counts == k + 1)
            for i in range(k):
                a, b = set(subsets[i].classes), set(subsets[i + k].classes)
                assert not a & b and a | b == set(range(k))

    def test_duplicates_removed_and_votes_recounted(self):
        cm = np.array([[0, 4], [4, 0]])
        spec = derive_subsets(cm)
        assert [s.classes for s in spec.subsets] == [(1,), (0,), (0, 1)]
        assert spec.duplicates_removed == 2
        np.testing.assert_array_equal(spec.expected_votes, [2, 2])
        np.testing.assert_array_equal(expected_votes(spec.subsets, 2), [2, 2])

    def test_spec_json_round_trip(self, tmp_path):
        spec = derive_subsets(np.array([[0, 50, 30, 20], [5, 0, 1, 0], [0, 1, 0, 9], [2, 2, 2, 0]]))
        spec.save(tmp_path / "spec.json")
        back = EnsembleSpec.load(tmp_path / "spec.json")
        assert back.to_dict() == spec.to_dict()
        assert back.to_dict()["K"] == 4


class TestVote:
    def members_for_votes(self, family_, choices, k=3):
        out = np.zeros((len(family_), k))
        for j, (s, c) in enumerate(zip(family_, choices)):
            out[j, list(s)] = 0.1 / max(len(s) - 1, 1)
            out[j, c] = 0.9 if len(s) > 1 else 1.0
            out[j] /= out[j].sum()
        return out

    def test_agreement_branch(self):
        P = self.members_for_votes(FAMILY_A, [1, 2, 0, 0, 1, 1, 1])
        res = vote(P, family(FAMILY_A, 3), 3)
        np.testing.assert_array_equal(res.votes, [2, 4, 1])
        assert res.agreement and res.winner == 1
        containing = [j for j, s in enumerate(FAMILY_A) if 1 in s]
        np.testing.assert_allclose(res.fused, P[containing].mean(axis=0))

    def test_no_agreement_branch(self):
        P = self.members_for_votes(FAMILY_A, [1, 2, 0, 0, 0, 1, 1])
        res = vote(P, family(FAMILY_A, 3), 3)
        np.testing.assert_array_equal(res.votes, [3, 3, 1])
        assert not res.agreement and res.winner == 0
        np.testing.assert_allclose(res.fused, P.mean(axis=0))
        assert res.activated.all()

    @pytest.mark.parametrize("fam", [FAMILY_A, FAMILY_B])
    def test_matches_reference_on_grid(self, fam):
        subsets = family(fam, 3)
        P = grid_member_outputs(fam)
        res = vote(P, subsets, 3)
        for n in range(P.shape[1]):
            votes, winner, agreement, fused = reference_vote(P[:, n], [set(s) for s in fam], 3)
            assert list(res.votes[n]) == votes
            assert res.winner[n] == winner and res.agreement[n] == agreement
            np.testing.assert_allclose(res.fused[n], fused, atol=1e-12)

    def test_fused_is_a_distribution(self):
        P = grid_member_outputs(FAMILY_B)
        res = vote(P, family(FAMILY_B, 3), 3)
        np.testing.assert_allclose(res.fused.sum(axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_at_most_one_class_reaches_expected_votes(self, k):
        rng = np.random.default_rng(k)
        spec = derive_subsets(random_confusion(rng, k))
        m = spec.expected_votes
        M = len(spec.subsets)
        for votes in itertools.product(range(M + 1), repeat=k):
            if sum(votes) != M:
                continue
            assert sum(v == mk for v, mk in zip(votes, m)) <= 1

    def test_perfect_members_agree_on_true_class(self):
        subsets = family(FAMILY_A, 3)
        for true in range(3):
            P = np.zeros((7, 3))
            for j, s in enumerate(FAMILY_A):
                if true in s:
                    P[j, true] = 1.0
                else:
                    P[j, list(s)] = 1.0 / len(s)
            res = vote(P, subsets, 3)
            assert res.agreement and res.winner == true and np.argmax(res.fused) == true

    def test_deterministic(self):
        P = grid_member_outputs(FAMILY_A)[:, :200]
        a, b = vote(P, family(FAMILY_A, 3)), vote(P.copy(), family(FAMILY_A, 3))
        np.testing.assert_array_equal(a.fused, b.fused)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            vote(np.full((3, 3), 1 / 3), family(FAMILY_A, 3))
        with pytest.raises(ValueError):
            vote(np.full((7, 3), 1 / 3), family(FAMILY_A, 3), n_classes=4)


def grid_member_outputs(fam, steps=12):
    """Every combination of grid-valued member outputs respecting each member's subset.

    Singletons are one-hot, pairs range over ``p in {0, 1/4, ..., 1}`` and the
    full-label member over the simplex with step ``1/steps``.
    """
    options = []
    for s in fam:
        if len(s) == 1:
            v = np.zeros(3)
            v[s[0]] = 1.0
            options.append([v])
        elif len(s) == 2:
            opts = []
            for p in np.linspace(0, 1, 5):
                v = np.zeros(3)
                v[s[0]], v[s[1]] = p, 1 - p
                opts.append(v)
            options.append(opts)
        else:
            options.append([np.array([a, b, steps - a - b]) / steps
                            for a in range(steps + 1) for b in range(steps + 1 - a)])
    combos = list(itertools.product(*options))
    return np.stack([np.stack(c) for c in combos], axis=1)


class TestMembers:
    def test_specialist_embeds_into_full_label_space(self, blobs):
        X, y, k = blobs
        sp = SpecialistClassifier(small_estimator(), (0, 2), k).fit(X, y)
        P = sp.predict_proba(X)
        np.testing.assert_array_equal(P[:, [1, 3]], 0.0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0)
        mask = np.isin(y, [0, 2])
        assert np.mean(sp.predict(X[mask]) == y[mask]) > 0.95

    def test_singleton_specialist_is_constant_one_hot(self, blobs):
        X, y, k = blobs
        P = SpecialistClassifier(small_estimator(), (3,), k).fit(X, y).predict_proba(X)
        np.testing.assert_array_equal(P, np.tile(np.eye(k)[3], (len(X), 1)))

    def test_generalist_matches_plain_network(self, blobs):
        X, y, k = blobs
        sp = SpecialistClassifier(small_estimator(), tuple(range(k)), k).fit(X, y)
        plain = small_estimator(n_classes=k).fit(X, y)
        np.testing.assert_allclose(sp.predict_proba(X), plain.predict_proba(X))

    def test_empty_subset_class_rejected(self, blobs):
        X, y, k = blobs
        with pytest.raises(ValueError):
            SpecialistClassifier(small_estimator(), (0, k), k + 1).fit(X, y)

    def test_pure_ensemble_averages_members(self, blobs):
        X, y, _ = blobs
        ens = PureEnsembleClassifier(small_estimator(), seeds=[1, 2, 3]).fit(X, y)
        expected = np.mean([m.predict_proba(X) for m in ens.members_], axis=0)
        np.testing.assert_allclose(ens.predict_proba(X), expected)
        assert len({m.random_state for m in ens.members_}) == 3

    def test_pure_ensemble_duplicate_seeds_warn(self, blobs):
        X, y, _ = blobs
        with pytest.warns(RuntimeWarning):
            PureEnsembleClassifier(small_estimator(), seeds=[1, 1]).fit(X, y)


class TestSpecialistsEnsemble:
    def test_confusion_matrix_counts(self, blobs):
        X, y, k = blobs
        gen = small_estimator(n_classes=k).fit(X, y)
        cm, eps = build_confusion_matrix(gen.network_, X, y, per_class_count=20, target_fool_rate=0.9)
        assert cm.shape == (k, k) and eps > 0
        assert np.all(cm.sum(axis=1) <= 20)
        np.testing.assert_array_equal(confusion_counts([0, 0, 1], [1, 1, 0], 2), [[0, 2], [1, 0]])

    def test_fit_vote_and_reload(self, blobs):
        X, y, k = blobs
        ens = SpecialistsEnsembleClassifier(small_estimator(), per_class_count=20, target_fool_rate=0.9,
                                            random_state=5).fit(X, y)
        M = len(ens.spec_.subsets)
        assert M == 2 * k + 1 - ens.spec_.duplicates_removed
        assert ens.spec_.subsets[-1].classes == tuple(range(k))
        assert np.mean(ens.predict(X) == y) > 0.95
        np.testing.assert_allclose(ens.predict_proba(X).sum(axis=1), 1.0)
        again = SpecialistsEnsembleClassifier.from_members(ens.spec_, [m.network_ for m in ens.members_])
        np.testing.assert_array_equal(again.predict_proba(X), ens.predict_proba(X))

    def test_given_spec_skips_confusion_stage(self, blobs):
        X, y, k = blobs
        spec = derive_subsets(np.ones((k, k)) - np.eye(k))
        ens = SpecialistsEnsembleClassifier(small_estimator(), spec=spec).fit(X, y)
        assert not hasattr(ens, "confusion_matrix_")
        assert len(ens.members_) == len(spec.subsets)
