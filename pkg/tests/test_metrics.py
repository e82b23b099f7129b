from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otalign.exceptions import InputError
from otalign.metrics import (
    TrialSet,
    accuracy,
    c_avg,
    c_avg_at,
    eer_from_scores,
    equal_error_rate,
    operating_points,
    per_class_accuracy,
    trials_from_posteriors,
    write_det_csv,
)


def brute_eer(tar, non):
    """Walk every threshold (accept if score >= t, plus reject-all) in exact rationals."""
    cands = sorted(set(tar) | set(non)) + [float("inf")]
    pts = []
    for t in cands:
        far = Fraction(sum(s >= t for s in non), len(non))
        frr = Fraction(sum(s < t for s in tar), len(tar))
        pts.append((far, frr))
    for k, (far, frr) in enumerate(pts):
        if far - frr <= 0:
            if far == frr:
                return float(far)
            f0, r0 = pts[k - 1]
            d0, d1 = f0 - r0, far - frr
            lam = d0 / (d0 - d1)
            return float(((f0 + lam * (far - f0)) + (r0 + lam * (frr - r0))) / 2)
    raise AssertionError("no crossing")


def brute_cavg(S, y, theta, p_target=0.5):
    langs = sorted(set(y))
    N = len(langs)
    total = 0.0
    for lt in langs:
        mine = [i for i in range(len(y)) if y[i] == lt]
        p_miss = sum(not (S[i][lt] > theta) for i in mine) / len(mine)
        fa = 0.0
        for ln in langs:
            if ln == lt:
                continue
            theirs = [i for i in range(len(y)) if y[i] == ln]
            fa += sum(S[i][lt] > theta for i in theirs) / len(theirs)
        total += p_target * p_miss + (1 - p_target) / (N - 1) * fa
    return total / N


score_lists = st.lists(st.integers(0, 6).map(lambda k: k / 6), min_size=1, max_size=5)


class TestEER:
    def test_perfect_separation(self):
        assert eer_from_scores([0.9, 0.8], [0.1, 0.2]) == 0.0

    def test_total_inversion(self):
        assert eer_from_scores([0.1], [0.9]) == 1.0

    def test_two_by_two_matches_sweep(self):
        # accept >= 0.6 gives FAR = FRR = 0.5 exactly
        assert eer_from_scores([0.8, 0.4], [0.6, 0.2]) == brute_eer([0.8, 0.4], [0.6, 0.2]) == 0.5

    def test_interpolated_crossing(self):
        # FAR stays at 1/3 while FRR jumps 0 -> 1/2: the crossing is interpolated
        tar, non = [0.5, 0.9], [0.1, 0.3, 0.7]
        got = eer_from_scores(tar, non)
        assert got == pytest.approx(brute_eer(tar, non), abs=1e-15)
        assert got == pytest.approx(1 / 3, abs=1e-15)
        _, far, frr = operating_points(tar, non)
        assert not np.any(far == frr)

    @settings(max_examples=200, deadline=None)
    @given(score_lists, score_lists)
    def test_matches_exhaustive_sweep(self, tar, non):
        assert eer_from_scores(tar, non) == pytest.approx(brute_eer(tar, non), abs=1e-15)

    @given(score_lists, score_lists)
    def test_monotone_transform_invariance(self, tar, non):
        f = lambda v: [np.exp(3 * x) - 2 for x in v]  # noqa: E731
        assert eer_from_scores(f(tar), f(non)) == pytest.approx(eer_from_scores(tar, non), abs=1e-12)

    @pytest.mark.parametrize("tar, non", [([0.9, 0.8], [0.1, 0.2]), ([0.7], [0.2, 0.3, 0.1])])
    def test_negation_on_separable_sets(self, tar, non):
        e = eer_from_scores(tar, non)
        assert eer_from_scores([-x for x in tar], [-x for x in non]) == pytest.approx(1 - e)

    def test_empty_class(self):
        with pytest.raises(InputError):
            eer_from_scores([], [0.1])

    def test_trial_set_pooling(self):
        S = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
        ts = TrialSet(S, [0, 1, 1])
        tar, non = ts.split()
        assert sorted(tar) == [0.4, 0.8, 0.9]
        assert sorted(non) == [0.1, 0.2, 0.6]
        assert equal_error_rate(ts) == brute_eer(list(tar), list(non))


class TestCavg:
    def test_perfect_scores(self):
        S = np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]])
        assert c_avg(TrialSet(S, [0, 1, 0])) == 0.0

    def test_all_wrong(self):
        # every target score sits below every non-target score: at any
        # threshold between them all targets miss and all pairs false-alarm
        S = np.array([[0.1, 0.9, 0.9], [0.9, 0.1, 0.9], [0.9, 0.9, 0.1]])
        assert c_avg_at(TrialSet(S, [0, 1, 2]), 0.5) == 1.0

    def test_one_miss_in_four(self):
        S = np.array([[0.9, 0.1], [0.4, 0.1], [0.1, 0.9], [0.1, 0.8]])
        assert c_avg_at(TrialSet(S, [0, 0, 1, 1]), 0.5, p_target=0.5) == pytest.approx(0.125)

    def test_acceptance_is_strict(self):
        S = np.array([[0.5, 0.2], [0.2, 0.9]])
        # score equal to the threshold is a miss
        assert c_avg_at(TrialSet(S, [0, 1]), 0.5) == brute_cavg(S, [0, 1], 0.5) == pytest.approx(0.25)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 3), st.lists(st.integers(0, 4), min_size=4, max_size=8), st.integers(0, 2**31))
    def test_matches_brute_force(self, N, raw_labels, seed):
        y = [v % N for v in raw_labels]
        if len(set(y)) < 2:
            return
        S = np.random.default_rng(seed).integers(0, 5, (len(y), N)) / 4
        ts = TrialSet(S, y)
        for theta in (-1.0, 0.0, 0.25, 0.5, 1.0):
            assert c_avg_at(ts, theta) == pytest.approx(brute_cavg(S, y, theta), abs=1e-15)
        best = min(brute_cavg(S, y, t) for t in np.linspace(-0.1, 1.1, 49))
        assert c_avg(ts) == pytest.approx(best, abs=1e-15)
        assert 0.0 <= c_avg(ts) <= c_avg_at(ts, 0.5) <= 1.0

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.2, 1.5])
    def test_invalid_prior(self, p):
        ts = TrialSet(np.eye(2), [0, 1])
        with pytest.raises(InputError):
            c_avg(ts, p_target=p)

    def test_fixed_mode_needs_threshold(self):
        with pytest.raises(InputError):
            c_avg(TrialSet(np.eye(2), [0, 1]), mode="fixed_threshold")


class TestAccuracy:
    def test_cases(self):
        y = np.array([0, 1, 2, 1])
        assert accuracy(np.eye(3)[y], y) == 1.0
        assert accuracy(np.tile([0, 0, 1.0], (2, 1)), [0, 1]) == 0.0
        P = np.eye(3)[[0, 1, 2, 0]]
        assert accuracy(P, y) == 0.75

    def test_ties_go_to_lowest_index(self):
        U = np.full((4, 2), 0.5)
        assert accuracy(U, [0, 1, 0, 1]) == 0.5
        assert accuracy(U, [0, 0, 0, 0]) == 1.0

    @given(st.permutations(list(range(6))))
    def test_order_invariance(self, perm):
        r = np.random.default_rng(0)
        P = r.uniform(size=(6, 3))
        y = r.integers(0, 3, 6)
        assert accuracy(P[perm], y[perm]) == accuracy(P, y)

    def test_per_class(self):
        P = np.eye(2)[[0, 0, 1, 0]]
        assert per_class_accuracy(P, np.array([0, 0, 1, 1])) == {0: 1.0, 1: 0.5}


class TestPosteriorTrials:
    def test_restricts_to_present_languages(self):
        P = np.array([[0.7, 0.1, 0.2], [0.1, 0.2, 0.7]])
        ts = trials_from_posteriors(P, [0, 2])
        np.testing.assert_array_equal(ts.scores, P[:, [0, 2]])
        np.testing.assert_array_equal(ts.true_labels, [0, 1])

    def test_unknown_class_scores_zero_with_warning(self):
        P = np.array([[0.7, 0.3], [0.4, 0.6]])
        with pytest.warns(UserWarning, match="outside"):
            ts = trials_from_posteriors(P, [0, 5])
        np.testing.assert_array_equal(ts.scores[:, 1], [0.0, 0.0])

    def test_det_csv(self, tmp_path):
        ts = TrialSet(np.array([[0.9, 0.1], [0.3, 0.7]]), [0, 1])
        path = tmp_path / "det.csv"
        write_det_csv(ts, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "threshold,far,frr"
        assert lines[-1] == "inf,0.0,1.0"
