"""Shared fixture builders for the test suite.

The Taxi fixtures are expensive enough (training 35 candidates, solving
for Q*) that they are built once per process and cached.
"""
from __future__ import annotations

import functools

import numpy as np

from bvftselect.candidates import CandidatePair, eval_cache_from_table, sweep_candidates, taxi_spec_grid
from bvftselect.envs import TaxiSpec, TransitionDataset, behavior_for, build_taxi, generate_dataset
from bvftselect.mdp import TabularMdp, random_mdp, solve_q_star

FULL_DATASET = 200_000
DATA_SEED = 1


@functools.lru_cache(maxsize=None)
def taxi_fixture(variant: str = "classic", p_rand: float = 0.0):
    """(mdp, q_star, 35 candidates with true values, 200k-row dataset)."""
    mdp = build_taxi(TaxiSpec(variant=variant, p_rand=p_rand))
    q_star = solve_q_star(mdp)
    pairs = sweep_candidates(mdp, taxi_spec_grid())
    data = generate_dataset(mdp, behavior_for(mdp), FULL_DATASET, DATA_SEED, env_id=variant)
    return mdp, q_star, pairs, data


def dataset_from_rows(s, a, r, s_next, terminal=None, gamma=0.9, r_max=1.0, n_states=None, n_actions=None):
    s = np.asarray(s)
    if terminal is None:
        terminal = np.zeros(len(s), dtype=bool)
    meta = {"gamma": gamma, "r_max": r_max}
    if n_states is not None:
        meta["n_states"] = n_states
    if n_actions is not None:
        meta["n_actions"] = n_actions
    return TransitionDataset(s, a, r, s_next, terminal, meta)


def sampled_dataset(mdp: TabularMdp, n: int, rng: np.random.Generator) -> TransitionDataset:
    """i.i.d. (s, a) uniform, s' ~ P(.|s, a): the offline protocol with uniform mu."""
    S, A = mdp.n_states, mdp.n_actions
    s = rng.integers(S, size=n)
    a = rng.integers(A, size=n)
    P = mdp.transition
    cdf = np.cumsum(P[s, a], axis=1)
    u = rng.random(n)[:, None]
    s2 = np.minimum((u > cdf).sum(axis=1), S - 1)
    return TransitionDataset(
        s, a, mdp.reward[s, a], s2, mdp.terminal_mask[s2], {"gamma": mdp.gamma, "r_max": mdp.r_max, "n_states": S, "n_actions": A}
    )


def small_mdp(seed: int, n_states: int = 20, n_actions: int = 3, gamma: float = 0.9) -> TabularMdp:
    return random_mdp(n_states, n_actions, gamma, np.random.default_rng(seed))


def greedy_evals(tables, data, v_max=None):
    return [eval_cache_from_table(q, data, "greedy", v_max=v_max) for q in tables]


def pair(q) -> CandidatePair:
    return CandidatePair.greedy(np.asarray(q, dtype=np.float64))


def distinct_cell_dataset(mdp: TabularMdp, n: int, rng: np.random.Generator) -> TransitionDataset:
    """Like ``sampled_dataset`` but every (s, a) cell appears at most once."""
    S, A = mdp.n_states, mdp.n_actions
    cells = rng.choice(S * A, size=n, replace=False)
    s, a = np.divmod(cells, A)
    cdf = np.cumsum(mdp.transition[s, a], axis=1)
    s2 = np.minimum((rng.random(n)[:, None] > cdf).sum(axis=1), S - 1)
    return TransitionDataset(
        s, a, mdp.reward[s, a], s2, mdp.terminal_mask[s2], {"gamma": mdp.gamma, "r_max": mdp.r_max, "n_states": S, "n_actions": A}
    )
