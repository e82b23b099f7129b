import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment, linprog

from otalign._validation import one_hot
from otalign.exceptions import ConfigError, DegenerateAlignmentError, InputError
from otalign.transport import (
    AlignConfig,
    SinkhornConvergenceWarning,
    align_grad,
    exact_ot_oracle,
    hard_coupling_weights,
    joint_cost_grad,
    joint_cost_matrix,
    pot_align_loss,
    read_matrix_csv,
    sinkhorn,
    soft_coupling_weights,
    write_matrix_csv,
)


def _assignment_value(C):
    r, c = linear_sum_assignment(C)
    return C[r, c].sum() / C.shape[0]


def _lp_value(C, a, b):
    n, m = C.shape
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1
    for j in range(m):
        A_eq[n + j, j::m] = 1
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    return res.fun


def _normalize_rows(M):
    return M / M.sum(axis=1, keepdims=True)


class TestJointCost:
    def test_identical_tuple_costs_zero(self):
        z = np.array([[0.6, 0.8]])
        y = np.array([[0.0, 1.0]])
        assert joint_cost_matrix(z, y, z, y)[0, 0] == 0.0

    def test_direct_arithmetic(self):
        C = joint_cost_matrix([[0.0, 0.0]], [[1, 0]], [[3.0, 4.0]], [[0.0, 1.0]], alpha=0.001)
        assert C[0, 0] == pytest.approx(25.002, abs=1e-12)

    def test_alpha_zero_is_feature_distance(self, rng):
        Zs, Zt = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
        Ys = one_hot(rng.integers(0, 2, 4), 2)
        P = _normalize_rows(rng.uniform(0.1, 1, (5, 2)))
        D = ((Zs[:, None, :] - Zt[None, :, :]) ** 2).sum(-1)
        np.testing.assert_allclose(joint_cost_matrix(Zs, Ys, Zt, P, alpha=0.0), D, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            joint_cost_matrix(np.zeros((2, 3)), np.eye(2), np.zeros((2, 4)), np.eye(2))

    def test_bad_probabilities(self):
        with pytest.raises(InputError):
            joint_cost_matrix(np.zeros((1, 2)), [[1, 0]], np.zeros((1, 2)), [[0.9, 0.9]])


class TestWeights:
    @pytest.mark.parametrize(
        "C, expected",
        [(1.0, 0.5), (0.0, 1 / (1 + np.exp(-5.0))), (2.0, 1 / (1 + np.exp(5.0)))],
    )
    def test_tabulated_soft_weights(self, C, expected):
        assert soft_coupling_weights(np.array([[C]]), beta=5, tau=1)[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_tabulated_decimals(self):
        w = soft_coupling_weights(np.array([[0.0, 2.0]]), 5, 1)
        np.testing.assert_allclose(w, [[0.993307, 0.006693]], atol=5e-7)

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=20), st.floats(0.1, 20), st.floats(-3, 3))
    def test_soft_weights_nonincreasing_in_cost(self, costs, beta, tau):
        C = np.sort(np.array(costs))[None, :]
        w = soft_coupling_weights(C, beta, tau)[0]
        assert np.all(np.diff(w) <= 0)
        assert np.all((w >= 0) & (w <= 1))

    def test_soft_weight_limits(self):
        w = soft_coupling_weights(np.array([[-1e6, 1e6]]), 5, 1)
        assert w[0, 0] == 1.0 and w[0, 1] == 0.0

    def test_soft_weights_reject_nonpositive_beta(self):
        with pytest.raises(InputError):
            soft_coupling_weights(np.zeros((1, 1)), beta=0.0)

    def test_hard_weights(self):
        np.testing.assert_array_equal(hard_coupling_weights(np.array([[0.5, 1.5]]), 1), [[1, 0]])
        np.testing.assert_array_equal(hard_coupling_weights(np.full((2, 2), 0.2), 1), np.ones((2, 2)))
        np.testing.assert_array_equal(hard_coupling_weights(np.full((2, 2), 3.0), 1), np.zeros((2, 2)))


class TestExactOracle:
    def test_two_permutation_cases(self):
        assert exact_ot_oracle([[1, 2], [3, 4]]) == pytest.approx(2.5)
        assert exact_ot_oracle([[1, 5], [2, 1]]) == pytest.approx(1.0)

    def test_zero_diagonal(self, rng):
        C = rng.uniform(1, 2, (5, 5))
        np.fill_diagonal(C, 0)
        assert exact_ot_oracle(C) == 0.0

    def test_refuses_large_inputs(self):
        with pytest.raises(InputError):
            exact_ot_oracle(np.zeros((9, 9)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 2**32 - 1))
    def test_matches_hungarian_assignment(self, n, seed):
        C = np.random.default_rng(seed).uniform(0, 10, (n, n))
        assert exact_ot_oracle(C) == pytest.approx(_assignment_value(C), rel=1e-12)


class TestSinkhorn:
    def test_zero_cost_matching(self):
        P = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), epsilon=0.01)
        np.testing.assert_allclose(P.plan, [[0.5, 0], [0, 0.5]], atol=1e-6)
        assert P.cost(np.array([[0.0, 1.0], [1.0, 0.0]])) <= 1e-3

    def test_all_zero_cost_gives_zero_cost(self):
        C = np.zeros((3, 3))
        assert sinkhorn(C).cost(C) == 0.0

    def test_matches_oracle_at_small_epsilon(self, quiet_sinkhorn):
        C = np.random.default_rng(4).uniform(0, 1, (4, 4))
        P = sinkhorn(C, epsilon=0.001 * C.mean())
        assert P.cost(C) == pytest.approx(exact_ot_oracle(C), rel=0.01)

    def test_nonuniform_marginals_match_linear_program(self, rng):
        C = rng.uniform(0, 1, (3, 5))
        a = np.array([0.5, 0.3, 0.2])
        b = np.array([0.1, 0.2, 0.3, 0.2, 0.2])
        P = sinkhorn(C, a, b, epsilon=1e-3)
        assert P.converged
        assert P.cost(C) == pytest.approx(_lp_value(C, a, b), rel=0.01)

    @pytest.mark.parametrize("a", [[0.5, 0.4], [1.0, 0.0], [0.5, 0.5, 0.0], [np.nan, 1.0]])
    def test_invalid_marginals(self, a):
        with pytest.raises(InputError):
            sinkhorn(np.ones((2, 2)), a=a)

    def test_nonconvergence_warns_and_reports(self):
        C = np.random.default_rng(0).uniform(0, 1, (6, 6))
        with pytest.warns(SinkhornConvergenceWarning):
            P = sinkhorn(C, epsilon=1e-4, max_iter=3)
        assert not P.converged
        assert P.violation > 1e-9 and P.n_iter == 3

    def test_tiny_epsilon_stays_finite(self, quiet_sinkhorn):
        C = np.random.default_rng(1).uniform(0, 50, (7, 9))
        P = sinkhorn(C, epsilon=1e-4, max_iter=2000)
        assert np.all(np.isfinite(P.plan))
        assert P.plan.sum() == pytest.approx(1.0, abs=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
    def test_plans_are_feasible(self, n, m, seed, eps):
        r = np.random.default_rng(seed)
        C = r.uniform(0, 1, (n, m))
        a = r.uniform(0.1, 1, n)
        b = r.uniform(0.1, 1, m)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SinkhornConvergenceWarning)
            P = sinkhorn(C, a / a.sum(), b / b.sum(), epsilon=eps)
        assert np.all(P.plan >= 0)
        if P.converged:
            np.testing.assert_allclose(P.plan.sum(1), a / a.sum(), atol=1e-6)
            np.testing.assert_allclose(P.plan.sum(0), b / b.sum(), atol=1e-6)

    def test_cost_scaling(self, rng):
        C = rng.uniform(0, 1, (5, 5))
        P1 = sinkhorn(C, epsilon=0.05)
        P2 = sinkhorn(7.0 * C, epsilon=0.35)
        np.testing.assert_allclose(P1.plan, P2.plan, atol=1e-9)
        assert P2.cost(7 * C) == pytest.approx(7 * P1.cost(C), rel=1e-8)

    def test_gap_to_oracle_shrinks_with_epsilon(self, quiet_sinkhorn):
        C = np.random.default_rng(11).uniform(0, 1, (5, 5))
        best = exact_ot_oracle(C)
        # unconverged plans can undershoot by their marginal violation, so
        # compare gap magnitudes
        gaps = [abs(sinkhorn(C, epsilon=f * C.mean()).cost(C) - best) for f in (0.1, 0.01, 0.001)]
        assert gaps[0] >= gaps[1] >= gaps[2]


class TestAlignLoss:
    def _batch(self, rng, n=6, m=5, d=3, k=3):
        Zs = rng.standard_normal((n, d))
        Zt = rng.standard_normal((m, d))
        Zs /= np.linalg.norm(Zs, axis=1, keepdims=True)
        Zt /= np.linalg.norm(Zt, axis=1, keepdims=True)
        Ys = one_hot(rng.integers(0, k, n), k)
        Pt = _normalize_rows(rng.uniform(0.1, 1, (m, k)))
        return Zs, Ys, Zt, Pt

    def test_self_transport_is_nearly_free(self):
        Z = np.eye(4)
        Y = np.eye(4)
        res = pot_align_loss(Z, Y, Z, Y, AlignConfig(weight_mode="none", epsilon=0.01))
        assert res.loss <= 1e-3

    def test_unweighted_alpha_zero_matches_oracle(self, quiet_sinkhorn, rng):
        Zs, Ys, Zt, Pt = self._batch(rng, 5, 5)
        cfg = AlignConfig(alpha=0.0, weight_mode="none", epsilon=0.001)
        res = pot_align_loss(Zs, Ys, Zt, Pt, cfg)
        assert res.loss == pytest.approx(exact_ot_oracle(res.cost), rel=0.01)

    def test_soft_weights_block_cross_pairs(self):
        # two tight pairs; cross-pair cost tau + 3 / beta
        beta, tau = 5.0, 1.0
        cross = tau + 3.0 / beta
        r = np.sqrt(cross / 2.0)
        Zs = np.array([[r, 0.0], [-r, 0.0]])
        res = pot_align_loss(Zs, np.eye(2), Zs.copy(), np.eye(2), AlignConfig(alpha=0.0, beta=beta, tau=tau))
        np.testing.assert_allclose(res.cost[0, 1], 4 * r * r)
        assert res.cost[0, 1] >= cross
        off = res.coupling.plan[0, 1] + res.coupling.plan[1, 0]
        assert off <= 1e-3 * res.coupling.plan.sum()

    def test_hard_mode_without_admissible_pairs(self):
        Zs = np.array([[1.0, 0.0]])
        Zt = np.array([[-1.0, 0.0]])
        with pytest.raises(DegenerateAlignmentError):
            pot_align_loss(Zs, [[1, 0]], Zt, [[0.5, 0.5]], AlignConfig(weight_mode="hard"))

    def test_weighted_and_unweighted_evaluation(self, rng):
        Zs, Ys, Zt, Pt = self._batch(rng)
        w = pot_align_loss(Zs, Ys, Zt, Pt, AlignConfig())
        u = pot_align_loss(Zs, Ys, Zt, Pt, AlignConfig(loss_eval="unweighted"))
        np.testing.assert_array_equal(w.coupling.plan, u.coupling.plan)
        assert w.loss == pytest.approx(np.sum(w.cost * w.weights * w.coupling.plan), rel=1e-12)
        assert u.loss == pytest.approx(np.sum(u.cost * u.coupling.plan), rel=1e-12)

    def test_mode_none_alpha_zero_effective_cost(self, rng):
        Zs, Ys, Zt, Pt = self._batch(rng)
        res = pot_align_loss(Zs, Ys, Zt, Pt, AlignConfig(alpha=0.0, weight_mode="none"))
        D = ((Zs[:, None] - Zt[None]) ** 2).sum(-1)
        np.testing.assert_allclose(res.cost * res.weights, D, atol=1e-12)

    def test_symmetry_in_mode_none(self, rng):
        Zs, _, Zt, _ = self._batch(rng, 5, 5)
        Y = np.full((5, 2), 0.5)
        one = np.tile([1.0, 0.0], (5, 1))
        cfg = AlignConfig(alpha=0.0, weight_mode="none", epsilon=0.5)
        fwd = pot_align_loss(Zs, one, Zt, Y, cfg).loss
        bwd = pot_align_loss(Zt, one, Zs, Y, cfg).loss
        assert fwd == pytest.approx(bwd, rel=1e-8)

    def test_raw_plan_cost_solves_on_joint_cost(self, rng):
        Zs, Ys, Zt, Pt = self._batch(rng)
        res = pot_align_loss(Zs, Ys, Zt, Pt, AlignConfig(plan_cost="raw"))
        ref = sinkhorn(res.cost, epsilon=0.05 * res.cost.mean(), stop_tol=1e-9)
        np.testing.assert_allclose(res.coupling.plan, ref.plan, atol=1e-12)

    @pytest.mark.parametrize("field", ["beta", "epsilon", "weight_mode", "loss_eval", "plan_cost"])
    def test_config_validation_names_field(self, field):
        bad = {"beta": 0.0, "epsilon": -1.0, "weight_mode": "x", "loss_eval": "x", "plan_cost": "x"}[field]
        with pytest.raises(ConfigError, match=f"align.{field}"):
            AlignConfig(**{field: bad})

    def test_config_round_trip(self):
        cfg = AlignConfig(alpha=0.01, weight_mode="hard")
        assert AlignConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            AlignConfig.from_dict({"gamma": 1})


class TestFrozenGradient:
    @pytest.mark.parametrize("loss_eval", ["weighted", "unweighted"])
    def test_matches_finite_differences(self, rng, loss_eval):
        Zs, Ys, Zt, Pt = TestAlignLoss()._batch(rng)
        cfg = AlignConfig(alpha=0.3, loss_eval=loss_eval)
        res = pot_align_loss(Zs, Ys, Zt, Pt, cfg)
        G = res.coupling.plan * (res.weights if loss_eval == "weighted" else 1.0)
        dZs, dZt, dYt = align_grad(res, Zs, Ys, Zt, Pt, cfg)

        def f(a, b, p):
            return float(np.sum(G * joint_cost_matrix(a, Ys, b, p, cfg.alpha)))

        h = 1e-6
        for arr, grad, which in ((Zs, dZs, 0), (Zt, dZt, 1)):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                plus, minus = arr.copy(), arr.copy()
                plus[idx] += h
                minus[idx] -= h
                args_p = [Zs, Zt][:]
                args_m = [Zs, Zt][:]
                args_p[which], args_m[which] = plus, minus
                num[idx] = (f(args_p[0], args_p[1], Pt) - f(args_m[0], args_m[1], Pt)) / (2 * h)
            np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-9)
        # probability rows: perturb along directions that keep rows summing to one
        num = np.zeros_like(Pt)
        for j in range(Pt.shape[0]):
            for c in range(Pt.shape[1]):
                E = np.zeros_like(Pt)
                E[j, c] = h
                num[j, c] = (np.sum(G * (cfg.alpha * (((Ys[:, None] - (Pt + E)[None]) ** 2).sum(-1))))
                             - np.sum(G * (cfg.alpha * (((Ys[:, None] - (Pt - E)[None]) ** 2).sum(-1))))) / (2 * h)
        np.testing.assert_allclose(dYt, num, rtol=1e-6, atol=1e-9)

    def test_joint_cost_grad_rows(self, rng):
        Zs, Ys, Zt, Pt = TestAlignLoss()._batch(rng)
        G = np.zeros((6, 5))
        G[0, 0] = 1.0
        dZs, dZt, _ = joint_cost_grad(Zs, Ys, Zt, Pt, G, 0.0)
        np.testing.assert_allclose(dZs[0], 2 * (Zs[0] - Zt[0]))
        np.testing.assert_allclose(dZt[0], 2 * (Zt[0] - Zs[0]))
        assert np.all(dZs[1:] == 0)


def test_matrix_csv_round_trip(tmp_path, rng):
    M = rng.uniform(0, 1, (3, 4))
    path = tmp_path / "m.csv"
    write_matrix_csv(M, path)
    np.testing.assert_array_equal(read_matrix_csv(path), M)
    assert path.read_text().splitlines()[0] == "row,col,value"
