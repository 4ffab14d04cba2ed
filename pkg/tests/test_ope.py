"""Tabular FQE and the two BVFT+OPE selection strategies."""

import math
import warnings

import numpy as np
import pytest

from bvftselect import bvft, ope
from bvftselect.candidates import CandidateEval, eval_cache_from_table
from bvftselect.exceptions import ArgumentError
from bvftselect.mdp import Policy, bellman_policy_backup, random_mdp, solve_q_pi

from helpers import dataset_from_rows, sampled_dataset


def exhaustive(mdp):
    """Every (s, a) exactly once, successors from a deterministic MDP."""
    S, A = mdp.n_states, mdp.n_actions
    s, a = np.divmod(np.arange(S * A), A)
    s2 = mdp.flat_transition.indices
    assert s2.size == S * A
    return dataset_from_rows(s, a, mdp.reward[s, a], s2, mdp.terminal_mask[s2], gamma=mdp.gamma, r_max=mdp.r_max, n_states=S, n_actions=A)


@pytest.fixture
def det_mdp(rng):
    return random_mdp(12, 3, 0.9, rng, deterministic=True)


class TestConfig:
    def test_label(self):
        assert ope.FqeConfig(30, 2, 1.5).label == "k30-agg2-u1.5"

    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(aggregation_factor=0), dict(unseen_default=-1.0)])
    def test_invalid(self, kw):
        args = dict(iterations=5)
        args.update(kw)
        with pytest.raises(ArgumentError):
            ope.FqeConfig(**args)


class TestFqe:
    def test_converges_to_q_pi(self, det_mdp, rng):
        pol = Policy.stochastic(rng.dirichlet(np.ones(3), size=12))
        q = ope.fqe(exhaustive(det_mdp), pol, ope.FqeConfig(300))
        assert np.max(np.abs(q - solve_q_pi(det_mdp, pol, tol=1e-12))) <= 1e-6

    def test_k_steps_equal_k_backups(self, det_mdp, rng):
        pol = Policy.stochastic(rng.dirichlet(np.ones(3), size=12))
        data = exhaustive(det_mdp)
        for K in (1, 2, 7):
            q = np.zeros((12, 3))
            for _ in range(K):
                q = bellman_policy_backup(det_mdp, pol, q)
            np.testing.assert_allclose(ope.fqe(data, pol, ope.FqeConfig(K)), q, atol=1e-10)

    def test_gamma_zero_mean_reward(self, rng):
        s = np.array([0, 0, 1, 1, 1])
        a = np.array([0, 0, 1, 1, 0])
        r = np.array([1.0, 3.0, 2.0, 4.0, 5.0])
        d = dataset_from_rows(s, a, r, np.zeros(5, int), gamma=0.0, r_max=5.0, n_states=2, n_actions=2)
        pol = Policy.deterministic([0, 1])
        for K in (1, 5):
            q = ope.fqe(d, pol, ope.FqeConfig(K, unseen_default=0.5))
            np.testing.assert_allclose(q, [[2.0, 0.5], [5.0, 3.0]])

    def test_full_aggregation_constant_per_action(self, rng):
        mdp = random_mdp(10, 3, 0.9, rng)
        d = sampled_dataset(mdp, 300, rng)
        q = ope.fqe(d, Policy.uniform(10, 3), ope.FqeConfig(20, aggregation_factor=10))
        assert np.all(q == q[:1])

    def test_unseen_cells(self):
        d = dataset_from_rows([0], [0], [1.0], [0], [True], gamma=0.9, r_max=1.0, n_states=3, n_actions=2)
        q = ope.fqe(d, Policy.deterministic([0, 0, 0]), ope.FqeConfig(3, unseen_default=0.25))
        assert q[0, 0] == 1.0
        assert np.all(q.ravel()[1:] == 0.25)

    def test_pure(self, rng):
        mdp = random_mdp(8, 2, 0.9, rng)
        d = sampled_dataset(mdp, 200, rng)
        pol = Policy.uniform(8, 2)
        cfg = ope.FqeConfig(10, 2)
        np.testing.assert_array_equal(ope.fqe(d, pol, cfg), ope.fqe(d, pol, cfg))

    def test_empty_dataset(self):
        d = dataset_from_rows(np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0, int))
        with pytest.raises(ArgumentError):
            ope.fqe(d, Policy.deterministic([0]), ope.FqeConfig(1))


def grid_fixture(seed=0, m=3, configs=None):
    r = np.random.default_rng(seed)
    mdp = random_mdp(10, 3, 0.9, r)
    d = sampled_dataset(mdp, 800, r)
    pols = [Policy.stochastic(r.dirichlet(np.ones(3), size=10)) for _ in range(m)]
    configs = configs or [ope.FqeConfig(40), ope.FqeConfig(3), ope.FqeConfig(40, 5)]
    return mdp, d, pols, configs


class TestGrid:
    def test_size_order_labels(self):
        mdp, d, pols, cfgs = grid_fixture()
        out = ope.run_ope_grid(d, pols, cfgs)
        assert len(out) == len(pols) * len(cfgs)
        assert [(c.policy_index, c.ope_index) for c in out] == [(i, l) for i in range(3) for l in range(3)]
        assert out[4].label == f"fqe:{cfgs[1].label}:policy1"
        assert all(c.eval.mode == "policy" for c in out)

    def test_no_policies(self):
        mdp, d, _, cfgs = grid_fixture()
        assert ope.run_ope_grid(d, [], cfgs) == []

    def test_failures_reported(self):
        mdp, d, pols, cfgs = grid_fixture()
        bad = Policy.deterministic(np.zeros(4, dtype=int))
        failures = []
        out = ope.run_ope_grid(d, [pols[0], bad], cfgs, failures=failures)
        assert len(out) == 3
        assert [(i, l) for i, l, _ in failures] == [(1, 0), (1, 1), (1, 2)]


def hand_cache(qa, backup):
    return CandidateEval(np.asarray(qa, float), np.asarray(backup, float), "policy")


class TestStrategy1:
    def test_single_estimate_matches_pe_q(self):
        mdp, d, pols, _ = grid_fixture(1, m=4)
        cands = ope.run_ope_grid(d, pols, [ope.FqeConfig(25)])
        grid = bvft.ResolutionGrid.default(d.v_max)
        s1 = ope.strategy1_rank(cands, d, grid)
        direct = bvft.bvft_pe_q_rank([c.eval for c in cands], d, grid)
        np.testing.assert_array_equal(s1.ranking, direct.ranking)

    def test_single_estimate_lambda_zero_matches_pe(self):
        mdp, d, pols, _ = grid_fixture(2, m=4)
        cands = ope.run_ope_grid(d, pols, [ope.FqeConfig(25)])
        grid = bvft.ResolutionGrid.default(d.v_max)
        s1 = ope.strategy1_rank(cands, d, grid, lam=0.0)
        np.testing.assert_array_equal(s1.ranking, bvft.bvft_pe_rank([c.eval for c in cands], d, grid).ranking)

    def test_brute_force_four_rows(self):
        d = dataset_from_rows([0, 1, 2, 3], [0, 0, 0, 0], [0.0, 1.0, 0.5, 0.2], [1, 2, 3, 0], gamma=0.5, r_max=1.0)
        caches = [
            hand_cache([0.3, 1.2, 0.7, 0.4], [0.5, 0.9, 0.2, 0.3]),
            hand_cache([0.1, 0.1, 0.9, 0.9], [0.1, 0.9, 0.9, 0.1]),
            hand_cache([0.5, 1.5, 0.6, 0.3], [1.2, 0.4, 0.1, 0.6]),
            hand_cache([1.0, 1.0, 1.0, 0.0], [0.0, 0.0, 2.0, 1.0]),
        ]
        cands = [ope.OpeCandidate(i // 2, i % 2, None, c) for i, c in enumerate(caches)]
        eps_grid = (0.25, 0.5, 1.0)
        lam = 0.3
        # oracle: direct summation over every (i, j, eps)
        scores = []
        for i, ci in enumerate(caches):
            y = [d.r[t] + 0.5 * ci.backup[t] for t in range(4)]
            per_eps = []
            for eps in eps_grid:
                worst = 0.0
                for cj in caches:
                    keys = [(math.floor(ci.qa[t] / eps), math.floor(cj.qa[t] / eps)) for t in range(4)]
                    sq = 0.0
                    for t in range(4):
                        members = [u for u in range(4) if keys[u] == keys[t]]
                        sq += (ci.qa[t] - sum(y[u] for u in members) / len(members)) ** 2
                    worst = max(worst, math.sqrt(sq / 4))
                per_eps.append(worst)
            scores.append(min(per_eps) - lam * sum(ci.qa) / 4)
        order = sorted(range(4), key=lambda k: (scores[k], k))
        best_pos = [min(order.index(2 * p), order.index(2 * p + 1)) for p in range(2)]
        expected = sorted(range(2), key=lambda p: (best_pos[p], p))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            s1 = ope.strategy1_rank(cands, d, bvft.ResolutionGrid(eps_grid), lam=lam)
        np.testing.assert_allclose(s1.diagnostics["pair_scores"], scores, rtol=1e-12)
        assert s1.ranking.tolist() == expected
        np.testing.assert_array_equal(s1.final_loss, best_pos)


class TestStrategy2:
    def test_single_estimate_is_fqe_avgq(self):
        mdp, d, pols, _ = grid_fixture(3, m=5)
        cands = ope.run_ope_grid(d, pols, [ope.FqeConfig(30)])
        s2 = ope.strategy2_rank(cands, d, bvft.ResolutionGrid.default(d.v_max))
        np.testing.assert_array_equal(s2.ranking, bvft.avgq_rank([c.eval for c in cands]).ranking)

    def test_never_picks_higher_loss(self):
        mdp, d, pols, cfgs = grid_fixture(4, m=3)
        cands = ope.run_ope_grid(d, pols, cfgs)
        grid = bvft.ResolutionGrid.default(d.v_max)
        s2 = ope.strategy2_rank(cands, d, grid)
        for i in range(3):
            own = [c for c in cands if c.policy_index == i]
            losses = bvft.bvft_pe_rank([c.eval for c in own], d, grid).final_loss
            assert s2.diagnostics["selected_loss"][i] == losses.min()

    def test_planted_q_pi_selected(self):
        mdp, d, pols, _ = grid_fixture(5, m=4)
        r = np.random.default_rng(5)
        cands = []
        v_max = d.v_max
        for i, pol in enumerate(pols):
            q_pi = solve_q_pi(mdp, pol)
            for l in range(3):
                q = q_pi if l == 1 else np.clip(q_pi + r.uniform(-0.3, 0.3, q_pi.shape) * v_max, 0, v_max)
                cands.append(ope.OpeCandidate(i, l, q, eval_cache_from_table(q, d, "policy", pol, v_max)))
        s2 = ope.strategy2_rank(cands, d, bvft.ResolutionGrid.default(v_max))
        assert s2.diagnostics["selected_ope_index"].tolist() == [1, 1, 1, 1]
