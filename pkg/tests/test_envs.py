"""Taxi construction and offline dataset generation."""

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order

from bvftselect.envs import (
    BehaviorSpec,
    TaxiSpec,
    TransitionDataset,
    behavior_for,
    build_taxi,
    generate_dataset,
    subsample,
)
from bvftselect.exceptions import ArgumentError, ConfigurationError, DataError
from bvftselect.mdp import Policy, random_mdp, solve_q_star

from helpers import dataset_from_rows


def reachable_states(mdp):
    """Breadth-first search over the support graph from every start state."""
    adj = sp.csr_matrix(
        (np.ones(mdp.flat_transition.nnz), mdp.flat_transition.indices, mdp.flat_transition.indptr),
        shape=mdp.flat_transition.shape,
    )
    graph = sp.csr_matrix(sp.kron(sp.identity(mdp.n_states), np.ones((1, mdp.n_actions))) @ adj)
    seen = set()
    for s in np.flatnonzero(mdp.initial_dist):
        seen.update(breadth_first_order(graph, s, directed=True, return_predecessors=False).tolist())
    return seen


class TestTaxiShape:
    def test_classic_counts(self):
        mdp = build_taxi(TaxiSpec())
        assert (mdp.n_states, mdp.n_actions) == (500, 6)

    @pytest.mark.parametrize("p_rand", [0.0, 0.1, 0.3])
    def test_stochastic_counts_and_rows(self, p_rand):
        mdp = build_taxi(TaxiSpec(variant="stochastic", p_rand=p_rand))
        assert mdp.n_states == 2000
        sums = np.asarray(mdp.flat_transition.sum(axis=1)).ravel()
        assert np.max(np.abs(sums - 1.0)) <= 1e-12

    def test_zero_noise_matches_noiseless_layout(self):
        a = build_taxi(TaxiSpec(variant="stochastic", p_rand=0.0))
        b = build_taxi(TaxiSpec(variant="stochastic"))
        assert (a.flat_transition != b.flat_transition).nnz == 0

    def test_rewards_shifted(self):
        mdp = build_taxi(TaxiSpec())
        assert set(np.unique(mdp.reward)) == {0.0, 21.0}
        assert mdp.r_max == 21.0

    def test_classic_is_deterministic(self):
        mdp = build_taxi(TaxiSpec())
        assert np.all(np.diff(mdp.flat_transition.indptr) == 1)

    def test_unsupported_grid(self):
        with pytest.raises(ConfigurationError):
            build_taxi(TaxiSpec(grid_size=6))

    def test_p_rand_rejected_on_classic(self):
        with pytest.raises(ConfigurationError):
            build_taxi(TaxiSpec(p_rand=0.1))

    def test_noise_folds_uniform_action(self):
        base = build_taxi(TaxiSpec(variant="stochastic"))
        noisy = build_taxi(TaxiSpec(variant="stochastic", p_rand=0.3))
        P0, P1 = base.transition, noisy.transition
        expected = 0.7 * P0 + 0.3 * P0.mean(axis=1, keepdims=True)
        np.testing.assert_allclose(P1, expected, atol=1e-12)


class TestGenerate:
    def test_deterministic(self):
        mdp = build_taxi(TaxiSpec())
        beh = behavior_for(mdp)
        assert generate_dataset(mdp, beh, 5000, 4).digest() == generate_dataset(mdp, beh, 5000, 4).digest()

    def test_size_and_meta(self):
        mdp = build_taxi(TaxiSpec())
        d = generate_dataset(mdp, behavior_for(mdp), 1234, 0, env_id="taxi")
        assert len(d) == 1234 and d.meta["size"] == 1234
        assert d.meta["env_id"] == "taxi" and d.meta["n_states"] == 500

    def test_transitions_are_reachable(self, rng):
        mdp = random_mdp(12, 3, 0.9, rng, branching=3)
        d = generate_dataset(mdp, behavior_for(mdp, epsilon=0.5), 3000, 5)
        P = mdp.transition
        assert np.all(P[d.s, d.a, d.s_next] > 0)
        np.testing.assert_array_equal(d.r, mdp.reward[d.s, d.a])

    def test_pure_random_actions_uniform(self):
        mdp = build_taxi(TaxiSpec())
        beh = BehaviorSpec(Policy.deterministic(np.zeros(500, dtype=int)), epsilon=1.0, mode="per-step")
        d = generate_dataset(mdp, beh, 1000, 11)
        assert beh.descriptor() == "pure-random"
        for s in np.unique(d.s):
            acts = d.a[d.s == s]
            n = acts.size
            if n < 30:
                continue
            counts = np.bincount(acts, minlength=6)
            sd = np.sqrt(n * (1 / 6) * (5 / 6))
            assert np.all(np.abs(counts - n / 6) <= 4 * sd)
        counts = np.bincount(d.a, minlength=6)
        sd = np.sqrt(1000 * (1 / 6) * (5 / 6))
        assert np.all(np.abs(counts - 1000 / 6) <= 4 * sd)

    def test_taxi_coverage_regression(self):
        mdp = build_taxi(TaxiSpec())
        d = generate_dataset(mdp, behavior_for(mdp, epsilon=0.5), 50_000, 3)
        cov = d.coverage()
        reachable = reachable_states(mdp) - set(np.flatnonzero(mdp.terminal_mask).tolist())
        assert np.all(np.bincount(d.a, minlength=6) > 0)
        assert cov["distinct_states"] >= 0.6 * len(reachable)
        # frozen from this seed
        assert len(reachable) == 400
        assert cov["distinct_states"] == 400
        assert cov["distinct_state_actions"] == 1952

    def test_horizon_cap(self):
        mdp = build_taxi(TaxiSpec())
        stay = BehaviorSpec(Policy.deterministic(np.full(500, 4)), epsilon=0.0, mode="per-step", horizon_cap=7)
        d = generate_dataset(mdp, stay, 70, 0)
        # staying never terminates, so every trajectory is exactly 7 identical rows
        blocks = d.s.reshape(10, 7)
        assert np.all(blocks == blocks[:, :1])
        assert np.all(d.s == d.s_next) and not d.terminal.any()

    def test_expert_only_data_never_explores(self):
        mdp = build_taxi(TaxiSpec())
        expert = behavior_for(mdp, epsilon=0.0, expert_fraction=1.0).expert
        d = generate_dataset(mdp, BehaviorSpec(expert, 0.0, "trajectory-mix", 200, 1.0), 2000, 2)
        np.testing.assert_array_equal(d.a, expert.table[d.s])

    def test_bad_behavior(self):
        with pytest.raises(ArgumentError):
            BehaviorSpec(Policy.deterministic([0]), epsilon=1.5)
        with pytest.raises(ArgumentError):
            BehaviorSpec(Policy.deterministic([0]), horizon_cap=0)


class TestDataset:
    def test_column_lengths_checked(self):
        with pytest.raises(DataError):
            TransitionDataset([0, 1], [0], [0.0, 0.0], [0, 0], [False, False])

    def test_bounds_checked(self):
        with pytest.raises(DataError):
            dataset_from_rows([0, 5], [0, 0], [0.0, 0.0], [0, 0], n_states=3)

    def test_iteration_yields_tuples(self):
        d = dataset_from_rows([0, 1], [1, 0], [0.5, 1.0], [1, 0], [False, True])
        t = list(d)[1]
        assert (t.s, t.a, t.r, t.s_next, t.terminal) == (1, 0, 1.0, 0, True)


class TestSubsample:
    def make(self, n=10):
        return dataset_from_rows(np.arange(n), np.zeros(n, int), np.arange(n) * 0.1, np.arange(n))

    def test_full_size_is_identity(self):
        d = self.make()
        assert subsample(d, 10, 0).digest() == d.digest()

    def test_zero_rejected(self):
        with pytest.raises(ArgumentError):
            subsample(self.make(), 0, 0)

    def test_too_large_rejected(self):
        with pytest.raises(ArgumentError):
            subsample(self.make(), 11, 0)

    def test_order_preserving_and_sized(self):
        sub = subsample(self.make(), 5, 3)
        assert len(sub) == 5 and sub.meta["size"] == 5
        assert np.all(np.diff(sub.s) > 0)

    def test_seeds_differ(self):
        d = self.make()
        assert not np.array_equal(subsample(d, 5, 1).s, subsample(d, 5, 2).s)
