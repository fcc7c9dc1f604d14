import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import bisect

from conftest import assert_covariance, random_graph, random_rule, random_spd
from social_learning import (
    CapacityError,
    CovarianceState,
    LinearRule,
    ModelParams,
    SocialGraph,
    StructuralError,
    initial_state,
    mvule_weights,
    uniform_clique_rule,
)
from social_learning.dynamics import (
    best_response_step,
    best_response_trajectory,
    clique_beta_map,
    clique_beta_woodbury,
    clique_covariance,
    clique_map_derivative,
    clique_variances,
    contraction_constant,
    covariance_closed_form,
    covariance_step,
    kalman_oracle,
    network_penultimate_trajectory,
    penultimate_initial,
    penultimate_step,
    penultimate_trajectory,
    shifted_map,
    shifted_map_derivative,
)
from social_learning.steady_state import clique_fixed_variance

seeds = st.integers(0, 2 ** 32 - 1)
UNIT2 = ModelParams.uniform(2, 1.0, 1.0)


def random_params(rng, n, sigma=None):
    sigma = rng.uniform(0.1, 3.0) if sigma is None else sigma
    return ModelParams(n, sigma, rng.uniform(0.2, 3.0, n))


class TestCovarianceStep:
    def test_scalar_hand_value(self):
        p = ModelParams.uniform(1, 1.0, 1.0)
        out = covariance_step(CovarianceState(np.zeros((1, 1))), LinearRule([0.5], [[0.5]]), p)
        assert out.c[0, 0] == pytest.approx(0.5)
        assert out.t == 1

    def test_pure_measurement(self, rng):
        p = random_params(rng, 4)
        rule = LinearRule(np.ones(4), np.zeros((4, 4)))
        out = covariance_step(CovarianceState(random_spd(rng, 4)), rule, p)
        assert np.allclose(out.c, np.diag(p.tau2), atol=1e-15)

    def test_uniform_clique_converges_to_closed_form(self):
        rule = uniform_clique_rule(UNIT2, 0.6)
        state = initial_state(UNIT2)
        for _ in range(200):
            state = covariance_step(state, rule, UNIT2)
        assert state.c[0, 0] == pytest.approx(clique_fixed_variance(2, 0.6), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(StructuralError):
            covariance_step(initial_state(UNIT2), LinearRule([1.0], [[0.0]]), UNIT2)

    @given(st.integers(1, 6), seeds)
    def test_emits_valid_covariances(self, n, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, n)
        g = random_graph(rng, n)
        state = CovarianceState(random_spd(rng, n))
        for _ in range(5):
            state = covariance_step(state, random_rule(rng, g), p)
            assert_covariance(state.c)


class TestClosedForm:
    def test_empty_sequence(self):
        c0 = initial_state(UNIT2)
        assert covariance_closed_form(c0, [], UNIT2) is c0

    def test_base_case(self, rng):
        rule = random_rule(rng, SocialGraph.complete(2))
        c0 = CovarianceState(random_spd(rng, 2))
        drift = rule.p.sum(axis=1)
        want = np.diag(rule.a ** 2) + np.outer(drift, drift) + rule.p @ c0.c @ rule.p.T
        assert np.allclose(covariance_closed_form(c0, [rule], UNIT2).c, want, atol=1e-14)

    def test_memoryless(self, rng):
        p = random_params(rng, 3)
        a = rng.uniform(0.1, 1, 3)
        rules = [LinearRule(a, np.zeros((3, 3)))] * 4
        out = covariance_closed_form(CovarianceState(random_spd(rng, 3)), rules, p)
        assert np.allclose(out.c, np.diag(a ** 2 * p.tau2))

    def test_fixed_rule_five_rounds(self, rng):
        rule = random_rule(rng, SocialGraph.complete(2))
        state = c0 = initial_state(UNIT2)
        for _ in range(5):
            state = covariance_step(state, rule, UNIT2)
        assert np.max(np.abs(covariance_closed_form(c0, [rule] * 5, UNIT2).c - state.c)) < 1e-12

    @given(st.integers(1, 6), st.integers(1, 10), seeds)
    def test_equals_iteration(self, n, t, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, n)
        g = random_graph(rng, n)
        rules = [random_rule(rng, g) for _ in range(t)]
        state = c0 = CovarianceState(random_spd(rng, n))
        for r in rules:
            state = covariance_step(state, r, p)
        closed = covariance_closed_form(c0, rules, p)
        assert closed.t == t
        assert np.max(np.abs(closed.c - state.c)) < 1e-10


class TestBestResponse:
    def test_scalar_first_round(self):
        p = ModelParams.uniform(1, 1.0, 1.0)
        step = best_response_step(CovarianceState(np.zeros((1, 1))), SocialGraph.complete(1), p)
        assert step.rule.a[0] == pytest.approx(0.5)
        assert step.next.c[0, 0] == pytest.approx(0.5)

    def test_n2_converges(self):
        steps = best_response_trajectory(initial_state(UNIT2), SocialGraph.complete(2), UNIT2, 60)
        assert steps[-1].next.beta == pytest.approx(math.sqrt(2) - 1, abs=1e-12)
        assert steps[-1].next.c[0, 0] == pytest.approx(2 - math.sqrt(2), abs=1e-12)

    @given(st.integers(1, 6), seeds)
    def test_measurement_weight_lower_bound(self, n, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, n)
        g = random_graph(rng, n)
        step = best_response_step(CovarianceState(random_spd(rng, n)), g, p)
        assert np.all(step.rule.a >= p.sigma2 / (p.tau2 + p.sigma2) - 1e-12)
        assert np.allclose(step.rule.a + step.rule.p.sum(axis=1), 1.0, atol=1e-12)
        assert not np.any(step.rule.p[~g.mask])
        assert_covariance(step.next.c)

    @given(st.integers(1, 8), seeds, st.floats(0.0, 100.0))
    def test_complete_graph_follows_beta_map(self, n, seed, target_beta):
        rng = np.random.default_rng(seed)
        p = random_params(rng, n)
        c = random_spd(rng, n)
        c *= max(target_beta, 1e-3) / mvule_weights(c).variance
        beta_prev = mvule_weights(c).variance
        step = best_response_step(CovarianceState(c), SocialGraph.complete(n), p)
        assert step.next.beta == pytest.approx(clique_beta_map(beta_prev, p), rel=1e-10, abs=1e-12)
        assert np.allclose(np.diag(step.next.c), clique_variances(beta_prev, p), rtol=1e-10)

    @pytest.mark.parametrize("seed", range(4))
    def test_best_response_is_optimal_for_each_agent(self, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, 3)
        c = random_spd(rng, 3)
        step = best_response_step(CovarianceState(c), SocialGraph.complete(3), p)
        # agent i's variance for a row (a, q): a^2 tau_i^2 + q C q' + sigma^2 (1 - a)^2, with sum q = 1 - a
        for i in range(3):
            got = step.next.c[i, i]
            a = rng.uniform(-0.5, 1.5, 10_000)
            q = rng.uniform(-1.5, 1.5, (10_000, 3))
            q[:, 2] = 1 - a - q[:, 0] - q[:, 1]
            grid = a ** 2 * p.tau2[i] + np.einsum("ki,ij,kj->k", q, c, q) + p.sigma2 * (1 - a) ** 2
            assert got <= grid.min() + 1e-8

    def test_non_complete_graph_uses_neighbors_only(self):
        g = SocialGraph.from_edges(3, [(0, 1), (1, 2), (2, 0)])
        p = ModelParams.uniform(3, 1.0, 1.0)
        step = best_response_step(initial_state(p), g, p)
        assert step.rule.p[0, 2] == 0.0 and step.rule.p[0, 1] > 0


class TestBetaMap:
    def test_hand_value(self):
        assert clique_beta_map(0.0, UNIT2) == pytest.approx(0.375)

    def test_fixed_point(self):
        b = math.sqrt(2) - 1
        assert abs(clique_beta_map(b, UNIT2) - b) < 1e-12

    @given(st.floats(0.0, 50.0), st.floats(0.0, 5.0), st.floats(0.1, 5.0))
    def test_n1_is_scalar_kalman(self, beta, sigma, tau):
        p = ModelParams.uniform(1, sigma, tau)
        prior = beta + sigma ** 2
        assert clique_beta_map(beta, p) == pytest.approx(prior * tau ** 2 / (prior + tau ** 2), rel=1e-12)

    @given(st.integers(1, 30), seeds, st.floats(0.0, 100.0))
    def test_matches_dense_woodbury(self, n, seed, beta):
        p = random_params(np.random.default_rng(seed), n)
        assert clique_beta_woodbury(beta, p) == pytest.approx(clique_beta_map(beta, p), rel=1e-9)
        assert mvule_weights(clique_covariance(beta, p)).variance == pytest.approx(clique_beta_map(beta, p), rel=1e-9)

    @given(st.integers(1, 50), seeds, st.floats(0.0, 100.0))
    def test_derivative_matches_finite_difference(self, n, seed, beta):
        p = random_params(np.random.default_rng(seed), n)
        h = 1e-5 * max(1.0, beta)
        fd = (clique_beta_map(beta + h, p) - clique_beta_map(beta - h if beta > h else beta, p)) \
            / (2 * h if beta > h else h)
        assert clique_map_derivative(beta, p) == pytest.approx(fd, abs=1e-5)

    @given(st.integers(1, 50), seeds)
    def test_shifted_slope_one_at_zero(self, n, seed):
        p = random_params(np.random.default_rng(seed), n)
        h = 1e-6
        fd = (shifted_map(h, p) - shifted_map(-h, p)) / (2 * h)
        assert fd == pytest.approx(1.0, abs=1e-6)
        assert shifted_map_derivative(0.0, p) == pytest.approx(1.0)

    @given(st.integers(1, 50), seeds)
    def test_contraction(self, n, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, n)
        k = contraction_constant(p)
        assert k < 1
        b = np.sort(rng.uniform(0, 100, 200))
        f = clique_beta_map(b, p)
        assert np.all(np.abs(np.diff(f)) <= k * np.diff(b) + 1e-12)

    def test_huge_n_is_finite(self):
        p = ModelParams.uniform(10 ** 6, 1.0, 1.0)
        assert 0 < clique_beta_map(0.3, p) < 1


class TestPenultimate:
    def test_scalar_fixed_point_bisection(self):
        p = ModelParams.uniform(1, 1.0, 1.0)  # tau_* = 1
        state = penultimate_initial(p)
        for _ in range(100):
            state, _ = penultimate_step(state, p)
        want = bisect(lambda v: v * v + v - 1, 0.0, 1.0, xtol=1e-15)
        assert state.V == pytest.approx(want, abs=1e-12)
        assert state.V == pytest.approx((math.sqrt(5) - 1) / 2, abs=1e-12)

    def test_first_round_uses_initial_estimates_only(self, rng):
        p = random_params(rng, 3)
        c0 = random_spd(rng, 3)
        state = penultimate_initial(p, c0)
        assert state.V == pytest.approx(mvule_weights(c0).variance)
        _, var = penultimate_step(state, p)
        prior = state.V + p.sigma2
        assert np.allclose(var, prior * p.tau2 / (prior + p.tau2))

    @given(st.integers(1, 10), seeds)
    def test_state_invariants(self, n, seed):
        p = random_params(np.random.default_rng(seed), n)
        state = penultimate_initial(p)
        for _ in range(6):
            state, _ = penultimate_step(state, p)
            assert 0 <= state.K <= 1
            assert np.all((0 <= state.k) & (state.k <= 1))
            assert 0 <= state.V <= p.tau_star2 + 1e-15

    @pytest.mark.parametrize("n", [10, 100, 1000])
    def test_large_n_gap_bound(self, n):
        p = ModelParams.uniform(n, 1.0, 1.0)
        var = penultimate_trajectory(p, 200)[-1]
        assert np.all(var - 0.5 <= 1 / (4 * n) + 1e-14)

    @given(st.integers(1, 6), seeds)
    def test_network_engine_matches_on_complete_graph(self, n, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, n)
        c0 = random_spd(rng, n)
        steps = network_penultimate_trajectory(p, SocialGraph.complete(n), 6, c0)
        got = np.array([np.diag(s.next.c) for s in steps])
        assert np.allclose(got, penultimate_trajectory(p, 6, c0), atol=1e-10)
        for s in steps:
            assert_covariance(s.next.gamma)


class TestOracle:
    def test_hand_value(self):
        p = ModelParams.uniform(1, 1.0, 1.0)
        assert kalman_oracle(p, t=1)[0, 0] == pytest.approx(2 / 3)

    @pytest.mark.parametrize("n", [1, 2, 3, 5, 6])
    def test_penultimate_is_perfect(self, n, rng):
        p = random_params(rng, n)
        c0 = random_spd(rng, n)
        assert np.max(np.abs(penultimate_trajectory(p, 8, c0) - kalman_oracle(p, c0, 8))) < 1e-10

    def test_best_response_perfect_only_for_one_agent(self, rng):
        p1 = random_params(rng, 1)
        steps = best_response_trajectory(initial_state(p1), SocialGraph.complete(1), p1, 8)
        br = np.array([np.diag(s.next.c) for s in steps])
        assert np.max(np.abs(br - kalman_oracle(p1, t=8))) < 1e-10
        steps = best_response_trajectory(initial_state(UNIT2), SocialGraph.complete(2), UNIT2, 8)
        br = np.array([np.diag(s.next.c) for s in steps])
        assert np.max(br - kalman_oracle(UNIT2, t=8)) > 1e-4

    @given(st.integers(2, 5), seeds)
    def test_no_dynamics_beats_the_oracle(self, n, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, n)
        g = random_graph(rng, n)
        oracle = kalman_oracle(p, t=5)
        pen = np.array([np.diag(s.next.c) for s in network_penultimate_trajectory(p, g, 5)])
        br = np.array([np.diag(s.next.c) for s in best_response_trajectory(initial_state(p), g, p, 5)])
        assert np.all(pen >= oracle - 1e-10)
        assert np.all(br >= oracle - 1e-10)

    def test_capacity(self):
        with pytest.raises(CapacityError):
            kalman_oracle(ModelParams.uniform(10, 1.0, 1.0), t=300)
