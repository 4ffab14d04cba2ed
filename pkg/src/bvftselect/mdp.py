"""Exact tabular MDP machinery.

Everything here is a pure function of its inputs and serves as the ground
truth oracle for the selection losses: Bellman operators, value iteration
for Q*, exact policy evaluation, and greedy policies.

Transitions are stored as a sparse ``(n_states * n_actions, n_states)``
matrix whose row ``s * n_actions + a`` is ``P(. | s, a)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .exceptions import ArgumentError, DimensionError, NonConvergenceError

__all__ = [
    "TabularMdp",
    "Policy",
    "QTable",
    "bellman_optimality_backup",
    "bellman_policy_backup",
    "solve_q_star",
    "solve_q_pi",
    "evaluate_policy_exact",
    "greedy_policy",
    "random_mdp",
    "DEFAULT_TOL",
    "DEFAULT_MAX_ITERS",
]

# Q-functions are plain (n_states, n_actions) float arrays.
QTable = np.ndarray

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 100_000

_SUM_TOL = 1e-12


class TabularMdp:
    """Finite discounted MDP with explicit transition and reward tables.

    Parameters
    ----------
    transition
        Either a dense ``(S, A, S)`` array or a sparse ``(S*A, S)`` matrix.
    reward
        ``(S, A)`` array with entries in ``[0, r_max]``.
    gamma
        Discount in ``[0, 1)``.
    initial_dist
        Start-state distribution ``d0``.
    terminal_mask
        Boolean vector; terminal states must self-loop with zero reward.
    r_max
        Reward bound. Defaults to ``reward.max()``.
    """

    def __init__(
        self,
        transition,
        reward,
        gamma: float,
        initial_dist,
        terminal_mask=None,
        r_max: Optional[float] = None,
    ):
        reward = np.array(reward, dtype=np.float64)
        if reward.ndim != 2:
            raise DimensionError(f"reward must be 2-D, got shape {reward.shape}")
        n_states, n_actions = reward.shape

        if sp.issparse(transition):
            flat = sp.csr_matrix(transition, dtype=np.float64, copy=True)
        else:
            dense = np.asarray(transition, dtype=np.float64)
            if dense.shape != (n_states, n_actions, n_states):
                raise DimensionError(
                    f"transition shape {dense.shape} != {(n_states, n_actions, n_states)}"
                )
            flat = sp.csr_matrix(dense.reshape(n_states * n_actions, n_states))
        if flat.shape != (n_states * n_actions, n_states):
            raise DimensionError(f"sparse transition shape {flat.shape} is inconsistent")
        flat.eliminate_zeros()
        flat.sort_indices()
        if flat.nnz and flat.data.min() < 0:
            raise ValueError("transition probabilities must be nonnegative")
        row_sums = np.asarray(flat.sum(axis=1)).ravel()
        if np.max(np.abs(row_sums - 1.0)) > _SUM_TOL:
            raise ValueError("every transition row must sum to 1")

        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {gamma}")

        d0 = np.array(initial_dist, dtype=np.float64)
        if d0.shape != (n_states,):
            raise DimensionError(f"initial_dist shape {d0.shape} != ({n_states},)")
        if d0.min() < 0 or abs(d0.sum() - 1.0) > _SUM_TOL:
            raise ValueError("initial_dist must be a probability vector")

        if terminal_mask is None:
            terminal_mask = np.zeros(n_states, dtype=bool)
        term = np.array(terminal_mask, dtype=bool)
        if term.shape != (n_states,):
            raise DimensionError(f"terminal_mask shape {term.shape} != ({n_states},)")

        if r_max is None:
            r_max = float(reward.max()) if reward.size else 0.0
        if reward.min() < 0 or reward.max() > r_max + 1e-12:
            raise ValueError("rewards must lie in [0, r_max]")

        for s in np.flatnonzero(term):
            rows = flat[s * n_actions : (s + 1) * n_actions]
            if np.any(reward[s] != 0.0) or np.any(np.abs(rows[:, [s]].toarray() - 1.0) > _SUM_TOL):
                raise ValueError(f"terminal state {s} must self-loop with zero reward")

        self.n_states = n_states
        self.n_actions = n_actions
        self.flat_transition = flat
        self.reward = reward
        self.gamma = float(gamma)
        self.initial_dist = d0
        self.terminal_mask = term
        self.r_max = float(r_max)
        for arr in (reward, d0, term, flat.data, flat.indices, flat.indptr):
            arr.setflags(write=False)

    @property
    def v_max(self) -> float:
        return self.r_max / (1.0 - self.gamma)

    @property
    def transition(self) -> np.ndarray:
        """Dense ``(S, A, S)`` view of the transition tensor."""
        return self.flat_transition.toarray().reshape(self.n_states, self.n_actions, self.n_states)

    def check_q(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.n_states, self.n_actions):
            raise DimensionError(
                f"Q-table shape {q.shape} does not match MDP ({self.n_states}, {self.n_actions})"
            )
        return q

    def expected_next(self, v: np.ndarray) -> np.ndarray:
        """``E_{s'~P(.|s,a)}[(1 - terminal(s')) v(s')]`` as an ``(S, A)`` array."""
        masked = np.where(self.terminal_mask, 0.0, v)
        return (self.flat_transition @ masked).reshape(self.n_states, self.n_actions)

    def with_reward(self, reward, r_max: Optional[float] = None) -> "TabularMdp":
        return TabularMdp(
            self.flat_transition, reward, self.gamma, self.initial_dist, self.terminal_mask, r_max
        )

    def __repr__(self) -> str:
        return (
            f"TabularMdp(n_states={self.n_states}, n_actions={self.n_actions}, "
            f"gamma={self.gamma}, r_max={self.r_max})"
        )


@dataclass(frozen=True, eq=False)
class Policy:
    """Deterministic (action per state) or stochastic (``pi[s, a]``) policy."""

    kind: str
    table: np.ndarray

    def __post_init__(self):
        if self.kind == "deterministic":
            table = np.asarray(self.table, dtype=np.int64)
            if table.ndim != 1 or (table.size and table.min() < 0):
                raise ArgumentError("deterministic policy needs a 1-D nonnegative action array")
        elif self.kind == "stochastic":
            table = np.asarray(self.table, dtype=np.float64)
            if table.ndim != 2 or table.min() < 0:
                raise ArgumentError("stochastic policy needs a nonnegative (S, A) matrix")
            if np.max(np.abs(table.sum(axis=1) - 1.0)) > _SUM_TOL:
                raise ArgumentError("stochastic policy rows must sum to 1")
        else:
            raise ArgumentError(f"unknown policy kind {self.kind!r}")
        table = table.copy()
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @classmethod
    def deterministic(cls, actions) -> "Policy":
        return cls("deterministic", np.asarray(actions))

    @classmethod
    def stochastic(cls, probs) -> "Policy":
        return cls("stochastic", np.asarray(probs))

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls("stochastic", np.full((n_states, n_actions), 1.0 / n_actions))

    @property
    def n_states(self) -> int:
        return self.table.shape[0]

    def probs(self, n_actions: int) -> np.ndarray:
        """Action probabilities as an ``(S, A)`` matrix."""
        if self.kind == "stochastic":
            if self.table.shape[1] != n_actions:
                raise DimensionError("policy action count mismatch")
            return self.table
        if self.table.size and self.table.max() >= n_actions:
            raise DimensionError("deterministic action index out of range")
        out = np.zeros((self.table.size, n_actions))
        out[np.arange(self.table.size), self.table] = 1.0
        return out

    def state_values(self, q: np.ndarray, states=None) -> np.ndarray:
        """``E_{a~pi(.|s)} q[s, a]`` for each state (or each entry of ``states``)."""
        q = np.asarray(q, dtype=np.float64)
        if q.shape[0] != self.n_states:
            raise DimensionError(f"policy covers {self.n_states} states, Q-table has {q.shape[0]}")
        if states is None:
            states = np.arange(self.n_states)
        if self.kind == "deterministic":
            if self.table.size and self.table.max() >= q.shape[1]:
                raise DimensionError("deterministic action index out of range")
            return q[states, self.table[states]]
        if self.table.shape[1] != q.shape[1]:
            raise DimensionError("policy action count mismatch")
        return np.einsum("ij,ij->i", self.table[states], q[states])

    def same_as(self, other: "Policy") -> bool:
        return self.kind == other.kind and np.array_equal(self.table, other.table)


def bellman_optimality_backup(mdp: TabularMdp, q) -> np.ndarray:
    """``(Tq)(s,a) = R(s,a) + gamma * E[max_a' q(s',a')]``; terminal successors count as 0."""
    q = mdp.check_q(q)
    return mdp.reward + mdp.gamma * mdp.expected_next(q.max(axis=1))


def bellman_policy_backup(mdp: TabularMdp, policy: Policy, q) -> np.ndarray:
    """``(T^pi q)(s,a) = R(s,a) + gamma * E[E_{a'~pi(s')} q(s',a')]``."""
    q = mdp.check_q(q)
    if policy.n_states != mdp.n_states:
        raise DimensionError("policy does not match MDP state count")
    return mdp.reward + mdp.gamma * mdp.expected_next(policy.state_values(q))


def _fixed_point(step, shape, tol: float, max_iters: int, what: str) -> np.ndarray:
    if tol <= 0:
        raise ArgumentError("tol must be positive")
    q = np.zeros(shape)
    residual = np.inf
    for _ in range(max_iters):
        q_next = step(q)
        residual = float(np.max(np.abs(q_next - q))) if q.size else 0.0
        q = q_next
        if residual <= tol:
            return q
    raise NonConvergenceError(f"{what} did not converge", residual, max_iters)


def solve_q_star(mdp: TabularMdp, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS) -> np.ndarray:
    """Value iteration from the zero table until successive iterates differ by at most ``tol``."""
    return _fixed_point(
        lambda q: bellman_optimality_backup(mdp, q),
        (mdp.n_states, mdp.n_actions),
        tol,
        max_iters,
        "value iteration",
    )


def solve_q_pi(
    mdp: TabularMdp,
    policy: Policy,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> np.ndarray:
    """Iterative policy evaluation for ``Q^pi``."""
    if policy.n_states != mdp.n_states:
        raise DimensionError("policy does not match MDP state count")
    return _fixed_point(
        lambda q: bellman_policy_backup(mdp, policy, q),
        (mdp.n_states, mdp.n_actions),
        tol,
        max_iters,
        "policy evaluation",
    )


def evaluate_policy_exact(
    mdp: TabularMdp,
    policy: Policy,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> float:
    """Expected discounted return ``J(pi) = sum_s d0(s) E_{a~pi(s)} Q^pi(s, a)``."""
    q_pi = solve_q_pi(mdp, policy, tol, max_iters)
    return float(mdp.initial_dist @ policy.state_values(q_pi))


def greedy_policy(q) -> Policy:
    """Deterministic argmax policy; ties go to the lowest action index."""
    q = np.asarray(q, dtype=np.float64)
    return Policy.deterministic(np.argmax(q, axis=1))


def random_mdp(
    n_states: int,
    n_actions: int,
    gamma: float,
    rng: np.random.Generator,
    *,
    r_max: float = 1.0,
    deterministic: bool = False,
    branching: Optional[int] = None,
) -> TabularMdp:
    """Random MDP with uniform rewards in ``[0, r_max]`` and a uniform start distribution.

    ``branching`` limits each row to that many successor states; ``deterministic``
    is the ``branching=1`` case.
    """
    if deterministic:
        branching = 1
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            if branching is None or branching >= n_states:
                P[s, a] = rng.dirichlet(np.ones(n_states))
            else:
                succ = rng.choice(n_states, size=branching, replace=False)
                P[s, a, succ] = rng.dirichlet(np.ones(branching)) if branching > 1 else 1.0
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, r_max, size=(n_states, n_actions))
    d0 = np.full(n_states, 1.0 / n_states)
    return TabularMdp(P, R, gamma, d0, r_max=r_max)
