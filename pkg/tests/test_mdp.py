"""Exact MDP machinery: operators, solvers, policies."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bvftselect.exceptions import DimensionError, NonConvergenceError
from bvftselect.mdp import (
    Policy,
    TabularMdp,
    bellman_optimality_backup,
    bellman_policy_backup,
    evaluate_policy_exact,
    greedy_policy,
    random_mdp,
    solve_q_pi,
    solve_q_star,
)


def chain(gamma=0.5):
    """s0 -> s1 with reward 1; s1 absorbing (terminal) with reward 0."""
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 1] = 1.0
    return TabularMdp(P, [[1.0], [0.0]], gamma, [1.0, 0.0], [False, True])


def one_state(gamma=0.9, r=1.0):
    return TabularMdp(np.ones((1, 1, 1)), [[r]], gamma, [1.0])


class TestConstruction:
    def test_rejects_bad_rows(self):
        P = np.full((2, 1, 2), 0.4)
        with pytest.raises(ValueError):
            TabularMdp(P, np.zeros((2, 1)), 0.9, [0.5, 0.5])

    def test_rejects_negative_reward(self):
        with pytest.raises(ValueError):
            TabularMdp(np.ones((1, 1, 1)), [[-1.0]], 0.9, [1.0])

    def test_rejects_bad_gamma(self):
        with pytest.raises(ValueError):
            one_state(gamma=1.0)

    def test_terminal_must_self_loop(self):
        P = np.zeros((2, 1, 2))
        P[:, 0, 0] = 1.0
        with pytest.raises(ValueError):
            TabularMdp(P, np.zeros((2, 1)), 0.9, [1.0, 0.0], [False, True])

    def test_v_max(self):
        assert one_state(0.95, 2.0).v_max == pytest.approx(40.0)

    def test_tables_are_read_only(self):
        mdp = chain()
        with pytest.raises(ValueError):
            mdp.reward[0, 0] = 3.0


class TestOptimalityBackup:
    def test_gamma_zero_returns_reward(self, rng):
        mdp = random_mdp(5, 3, 0.0, rng)
        q = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(bellman_optimality_backup(mdp, q), mdp.reward)

    def test_chain_by_hand(self):
        # (TQ)(s0) = 1 + 0.5 * 0, (TQ)(s1) = 0 (terminal successor)
        out = bellman_optimality_backup(chain(), np.zeros((2, 1)))
        np.testing.assert_array_equal(out, [[1.0], [0.0]])

    def test_q_star_is_fixed_point(self, rng):
        mdp = random_mdp(3, 2, 0.9, rng)
        q = solve_q_star(mdp, tol=1e-10)
        assert np.max(np.abs(bellman_optimality_backup(mdp, q) - q)) <= 1e-8

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            bellman_optimality_backup(chain(), np.zeros((3, 1)))


class TestPolicyBackup:
    def test_greedy_policy_matches_optimality_backup(self, rng):
        mdp = random_mdp(6, 3, 0.9, rng)
        q = rng.uniform(size=(6, 3))
        np.testing.assert_allclose(
            bellman_policy_backup(mdp, greedy_policy(q), q), bellman_optimality_backup(mdp, q), atol=1e-14
        )

    def test_gamma_zero(self, rng):
        mdp = random_mdp(4, 2, 0.0, rng)
        out = bellman_policy_backup(mdp, Policy.uniform(4, 2), rng.normal(size=(4, 2)))
        np.testing.assert_array_equal(out, mdp.reward)

    def test_q_pi_is_fixed_point(self, rng):
        mdp = random_mdp(5, 3, 0.9, rng)
        pol = Policy.stochastic(rng.dirichlet(np.ones(3), size=5))
        q = solve_q_pi(mdp, pol, tol=1e-10)
        assert np.max(np.abs(bellman_policy_backup(mdp, pol, q) - q)) <= 1e-8

    def test_policy_size_mismatch(self):
        with pytest.raises(DimensionError):
            bellman_policy_backup(chain(), Policy.deterministic([0, 0, 0]), np.zeros((2, 1)))


class TestSolvers:
    def test_geometric_series(self):
        q = solve_q_star(one_state(0.9))
        assert q[0, 0] == pytest.approx(10.0, abs=1e-6)

    def test_terminal_only(self):
        mdp = TabularMdp(np.ones((1, 2, 1)), np.zeros((1, 2)), 0.9, [1.0], [True])
        np.testing.assert_array_equal(solve_q_star(mdp), np.zeros((1, 2)))

    def test_non_convergence_carries_residual(self):
        with pytest.raises(NonConvergenceError) as info:
            solve_q_star(one_state(0.99), max_iters=5)
        assert info.value.residual > 0
        assert info.value.iterations == 5

    def test_chain_q_pi(self):
        q = solve_q_pi(chain(), Policy.deterministic([0, 0]))
        assert q[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_symmetric_two_state(self):
        P = np.full((2, 2, 2), 0.5)
        R = np.array([[1.0, 0.0], [1.0, 0.0]])
        mdp = TabularMdp(P, R, 0.9, [0.5, 0.5])
        q = solve_q_pi(mdp, Policy.uniform(2, 2))
        np.testing.assert_allclose(q[0], q[1], atol=1e-12)

    def test_greedy_of_q_star_evaluates_to_q_star(self, rng):
        mdp = random_mdp(8, 3, 0.9, rng)
        tol = 1e-9
        q_star = solve_q_star(mdp, tol=tol)
        q_pi = solve_q_pi(mdp, greedy_policy(q_star), tol=tol)
        # both iterates sit within tol * gamma / (1 - gamma) of their fixed points
        assert np.max(np.abs(q_pi - q_star)) <= 20 * tol

    def test_bellman_residual_bound(self, rng):
        mdp = random_mdp(10, 4, 0.95, rng)
        tol = 1e-8
        q = solve_q_star(mdp, tol=tol)
        assert np.max(np.abs(bellman_optimality_backup(mdp, q) - q)) <= 10 * tol

    def test_solution_within_v_max(self, rng):
        mdp = random_mdp(10, 3, 0.9, rng)
        q = solve_q_star(mdp)
        assert q.min() >= 0 and q.max() <= mdp.v_max


class TestEvaluate:
    def test_zero_reward(self, rng):
        mdp = random_mdp(4, 2, 0.9, rng, r_max=1.0).with_reward(np.zeros((4, 2)), r_max=1.0)
        assert evaluate_policy_exact(mdp, Policy.uniform(4, 2)) == 0.0

    def test_one_state(self):
        assert evaluate_policy_exact(one_state(0.9), Policy.deterministic([0])) == pytest.approx(10.0, abs=1e-6)

    def test_taxi_expert_beats_random(self, taxi):
        mdp, q_star, _, _ = taxi
        expert = evaluate_policy_exact(mdp, greedy_policy(q_star))
        uniform = evaluate_policy_exact(mdp, Policy.uniform(mdp.n_states, mdp.n_actions))
        assert expert > uniform

    def test_taxi_q_star_policy_dominates_candidates(self, taxi):
        mdp, q_star, pairs, _ = taxi
        best = evaluate_policy_exact(mdp, greedy_policy(q_star))
        assert best >= max(p.true_value for p in pairs) - 1e-8


class TestGreedy:
    def test_argmax(self):
        assert greedy_policy([[1.0, 3.0, 2.0]]).table[0] == 1

    def test_tie_goes_to_lowest_index(self):
        assert greedy_policy([[2.0, 2.0, 0.0]]).table[0] == 0

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_invariant_to_shift_and_scale(self, seed):
        r = np.random.default_rng(seed)
        q = r.normal(size=(6, 4))
        shifted = q * r.uniform(0.1, 10.0) + r.normal(size=(6, 1))
        assert greedy_policy(q).same_as(greedy_policy(shifted))


class TestContractionAndMonotonicity:
    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_both_operators_contract(self, seed):
        r = np.random.default_rng(seed)
        mdp = random_mdp(6, 3, 0.8, r)
        q1, q2 = r.normal(size=(2, 6, 3)) * 5
        pol = Policy.stochastic(r.dirichlet(np.ones(3), size=6))
        gap = np.max(np.abs(q1 - q2))
        t_gap = np.max(np.abs(bellman_optimality_backup(mdp, q1) - bellman_optimality_backup(mdp, q2)))
        p_gap = np.max(np.abs(bellman_policy_backup(mdp, pol, q1) - bellman_policy_backup(mdp, pol, q2)))
        assert t_gap <= mdp.gamma * gap + 1e-12
        assert p_gap <= mdp.gamma * gap + 1e-12

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_monotone(self, seed):
        r = np.random.default_rng(seed)
        mdp = random_mdp(5, 2, 0.9, r)
        q1 = r.normal(size=(5, 2))
        q2 = q1 + r.uniform(0, 1, size=(5, 2))
        assert np.all(bellman_optimality_backup(mdp, q1) <= bellman_optimality_backup(mdp, q2) + 1e-12)
