"""Candidate Q-functions from tabular Q-learning sweeps, and their evaluation caches."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .envs import TransitionDataset
from .exceptions import ArgumentError, CandidateTrainingError, DataError
from .mdp import Policy, TabularMdp, evaluate_policy_exact, greedy_policy

__all__ = [
    "CandidateSpec",
    "CandidatePair",
    "CandidateEval",
    "train_q_learning",
    "sweep_candidates",
    "build_eval_cache",
    "eval_cache_from_table",
    "taxi_spec_grid",
    "TAXI_INITIAL_VALUE",
]


@dataclass(frozen=True)
class CandidateSpec:
    learning_rate: float
    learning_steps: int
    exploration_eps: float = 0.3
    seed: int = 0
    label: str = ""
    horizon_cap: int = 200
    initial_value: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be positive")
        if self.learning_steps < 1:
            raise ArgumentError("learning_steps must be >= 1")
        if not 0.0 <= self.exploration_eps <= 1.0:
            raise ArgumentError("exploration_eps must lie in [0, 1]")
        if not np.isfinite(self.initial_value):
            raise ArgumentError("initial_value must be finite")
        if not self.label:
            object.__setattr__(
                self,
                "label",
                f"ql-lr{self.learning_rate:g}-steps{self.learning_steps}-seed{self.seed}",
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class CandidatePair:
    """A trained (policy, Q) pair; ``true_value`` is J(policy) in the MDP's reward units."""

    q: np.ndarray
    policy: Policy
    spec: Optional[CandidateSpec] = None
    true_value: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.q.ndim != 2:
            raise DataError("candidate Q-table must be 2-D")
        if self.policy.n_states != self.q.shape[0]:
            raise DataError("policy and Q-table disagree on state count")
        if not self.label and self.spec is not None:
            self.label = self.spec.label

    @classmethod
    def greedy(cls, q, **kwargs) -> "CandidatePair":
        return cls(q=q, policy=greedy_policy(q), **kwargs)


@dataclass(frozen=True, eq=False)
class CandidateEval:
    """Cached per-row quantities for one candidate on one dataset.

    ``qa[t] = Q(s_t, a_t)``; ``backup[t]`` is the next-state value (max over
    actions in greedy mode, expectation under the paired policy in policy
    mode), zeroed on terminal rows.
    """

    qa: np.ndarray
    backup: np.ndarray
    mode: str
    label: str = ""

    def __post_init__(self):
        if self.mode not in ("greedy", "policy"):
            raise ArgumentError(f"unknown cache mode {self.mode!r}")
        qa = np.asarray(self.qa, dtype=np.float64)
        backup = np.asarray(self.backup, dtype=np.float64)
        if qa.shape != backup.shape or qa.ndim != 1:
            raise DataError("qa and backup must be equal-length vectors")
        if not (np.all(np.isfinite(qa)) and np.all(np.isfinite(backup))):
            raise DataError("cache contains non-finite values")
        qa.setflags(write=False)
        backup.setflags(write=False)
        object.__setattr__(self, "qa", qa)
        object.__setattr__(self, "backup", backup)

    def __len__(self) -> int:
        return self.qa.shape[0]

    def take(self, rows) -> "CandidateEval":
        return CandidateEval(self.qa[rows], self.backup[rows], self.mode, self.label)


def train_q_learning(mdp: TabularMdp, spec: CandidateSpec) -> CandidatePair:
    """Online epsilon-greedy tabular Q-learning with a constant step size.

    The table starts at ``spec.initial_value`` everywhere; greedy ties are
    broken uniformly at random during training.
    """
    rng = np.random.default_rng(spec.seed)
    init_u = float(rng.random())
    u = rng.random((spec.learning_steps, 5))
    flat = mdp.flat_transition
    q = np.full((mdp.n_states, mdp.n_actions), float(spec.initial_value))
    _kernels.q_learning(
        flat.indptr.astype(np.int64),
        flat.indices.astype(np.int64),
        _kernels.row_cumulative(flat),
        mdp.reward.ravel(),
        mdp.terminal_mask,
        np.cumsum(mdp.initial_dist),
        q,
        float(spec.learning_rate),
        mdp.gamma,
        float(spec.exploration_eps),
        int(spec.horizon_cap),
        init_u,
        u,
    )
    return CandidatePair(q=q, policy=greedy_policy(q), spec=spec)


def sweep_candidates(
    mdp: TabularMdp,
    specs: Sequence[CandidateSpec],
    n_jobs: int = 1,
) -> list[CandidatePair]:
    """Train every spec and attach its exact true value. Output follows input order."""
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ArgumentError("candidate labels must be distinct")

    def run(spec: CandidateSpec) -> CandidatePair:
        try:
            pair = train_q_learning(mdp, spec)
            pair.true_value = evaluate_policy_exact(mdp, pair.policy)
        except Exception as exc:
            raise CandidateTrainingError(spec.label, exc) from exc
        return pair

    if n_jobs <= 1 or len(specs) <= 1:
        return [run(s) for s in specs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(run, specs))


# Taxi's rewards are shifted by +1 per step, so a table of 1/(1-gamma) = 20 here
# plays the role a zero table plays under the native -1 step reward: the same
# optimistic starting point, and identical updates on non-terminal steps.
TAXI_INITIAL_VALUE = 20.0


def taxi_spec_grid(
    learning_rates: Sequence[float] = (0.005, 0.01, 0.015, 0.02, 0.025),
    learning_steps: Sequence[int] = tuple(range(200_000, 500_001, 50_000)),
    exploration_eps: float = 0.3,
    seeds: Sequence[int] = (0,),
    initial_value: float = TAXI_INITIAL_VALUE,
) -> list[CandidateSpec]:
    """Cartesian hyperparameter grid (5 learning rates x 7 step counts by default)."""
    return [
        CandidateSpec(lr, steps, exploration_eps, seed, initial_value=initial_value)
        for seed, lr, steps in itertools.product(seeds, learning_rates, learning_steps)
    ]


def eval_cache_from_table(
    q,
    dataset: TransitionDataset,
    mode: str = "greedy",
    policy: Optional[Policy] = None,
    v_max: Optional[float] = None,
    label: str = "",
) -> CandidateEval:
    """Build a cache straight from a Q-table; clipped to ``[0, v_max]`` when given."""
    q = np.asarray(q, dtype=np.float64)
    if len(dataset):
        if max(dataset.s.max(), dataset.s_next.max()) >= q.shape[0] or dataset.a.max() >= q.shape[1]:
            raise DataError("dataset index outside the candidate table")
    if v_max is not None:
        q = np.clip(q, 0.0, v_max)
    qa = q[dataset.s, dataset.a]
    if mode == "greedy":
        nxt = q[dataset.s_next].max(axis=1) if len(dataset) else np.zeros(0)
    elif mode == "policy":
        if policy is None:
            raise ArgumentError("policy mode needs a policy")
        nxt = policy.state_values(q, dataset.s_next)
    else:
        raise ArgumentError(f"unknown cache mode {mode!r}")
    backup = np.where(dataset.terminal, 0.0, nxt)
    return CandidateEval(qa, backup, mode, label)


def build_eval_cache(pair: CandidatePair, dataset: TransitionDataset, mode: str = "greedy") -> CandidateEval:
    """Cache ``Q(s_t, a_t)`` and next-state backups for every dataset row.

    The table is clipped to ``[0, V_max]`` first, with ``V_max`` taken from the
    dataset metadata.
    """
    v_max = dataset.v_max if "r_max" in dataset.meta and "gamma" in dataset.meta else None
    return eval_cache_from_table(pair.q, dataset, mode, pair.policy, v_max, pair.label)
