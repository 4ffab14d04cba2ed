"""Taxi environments and offline dataset generation.

Two Taxi layouts on the classic 5x5 map:

* ``classic``: 25 taxi cells x 5 passenger locations (4 stands + in taxi)
  x 4 destinations = 500 states. Delivering the passenger moves to a
  terminal state (passenger location == destination).
* ``stochastic``: 25 taxi cells x 2^4 passenger-presence bits x 5 taxi
  statuses (empty, or carrying towards one of 4 destinations) = 2000
  states. Passengers appear/disappear independently at each stand every
  step, and with probability ``p_rand`` the taxi executes a uniformly
  random action instead of the chosen one.

Actions: 0 north, 1 south, 2 east, 3 west, 4 stay, 5 pickup/dropoff.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .exceptions import ArgumentError, ConfigurationError, DataError
from .mdp import Policy, TabularMdp

__all__ = [
    "TaxiSpec",
    "Transition",
    "TransitionDataset",
    "BehaviorSpec",
    "build_taxi",
    "generate_dataset",
    "subsample",
    "subsample_rows",
    "behavior_for",
    "TAXI_ACTIONS",
    "TAXI_LOCATIONS",
]

TAXI_ACTIONS = ("north", "south", "east", "west", "stay", "pickup_dropoff")
TAXI_LOCATIONS = ((0, 0), (0, 4), (4, 0), (4, 3))

_MAP = (
    "+---------+",
    "|R: | : :G|",
    "| : | : : |",
    "| : : : : |",
    "| | : | : |",
    "|Y| : |B: |",
    "+---------+",
)
_N_ACTIONS = 6
_PICKUP = 5


@dataclass(frozen=True)
class TaxiSpec:
    """Taxi construction parameters.

    ``reward_shift`` is added to every non-terminal reward so the MDP's
    rewards are nonnegative (step 0, success 21 with the defaults).
    ``spawn_prob`` is the per-step, per-stand presence flip probability of
    the stochastic layout.
    """

    grid_size: int = 5
    variant: str = "classic"
    p_rand: float = 0.0
    pickup_reward: float = 20.0
    step_reward: float = -1.0
    gamma: float = 0.95
    reward_shift: float = 1.0
    spawn_prob: float = 0.3

    def validate(self) -> None:
        if self.grid_size != 5:
            raise ConfigurationError(f"only the 5x5 Taxi map is supported, got grid_size={self.grid_size}")
        if self.variant not in ("classic", "stochastic"):
            raise ConfigurationError(f"unknown Taxi variant {self.variant!r}")
        if not 0.0 <= self.p_rand <= 1.0:
            raise ConfigurationError("p_rand must lie in [0, 1]")
        if self.variant == "classic" and self.p_rand != 0.0:
            raise ConfigurationError("p_rand applies to the stochastic variant only")
        if not 0.0 <= self.spawn_prob <= 1.0:
            raise ConfigurationError("spawn_prob must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")
        if min(self.pickup_reward, self.step_reward) + self.reward_shift < 0:
            raise ConfigurationError("reward_shift leaves negative rewards")

    @property
    def env_id(self) -> str:
        if self.variant == "classic":
            return "taxi"
        return f"taxi-stochastic(p_rand={self.p_rand:g})"


def _move(row: int, col: int, action: int) -> tuple[int, int]:
    if action == 0:
        return max(row - 1, 0), col
    if action == 1:
        return min(row + 1, 4), col
    if action == 2 and _MAP[1 + row][2 * col + 2] == ":":
        return row, col + 1
    if action == 3 and _MAP[1 + row][2 * col] == ":":
        return row, col - 1
    return row, col


def _classic_taxi(spec: TaxiSpec):
    n_states = 25 * 5 * 4
    rows, cols, vals = [], [], []
    R = np.zeros((n_states, _N_ACTIONS))
    terminal = np.zeros(n_states, dtype=bool)
    d0 = np.zeros(n_states)
    success = spec.pickup_reward + spec.reward_shift
    step = spec.step_reward + spec.reward_shift

    def index(cell, pas, dest):
        return (cell * 5 + pas) * 4 + dest

    for cell in range(25):
        r0, c0 = divmod(cell, 5)
        for pas in range(5):
            for dest in range(4):
                s = index(cell, pas, dest)
                if pas == dest:
                    terminal[s] = True
                    for a in range(_N_ACTIONS):
                        rows.append(s * _N_ACTIONS + a)
                        cols.append(s)
                        vals.append(1.0)
                    continue
                if pas < 4:
                    d0[s] = 1.0
                for a in range(_N_ACTIONS):
                    nxt, rew = s, step
                    if a == _PICKUP:
                        if pas < 4 and TAXI_LOCATIONS[pas] == (r0, c0):
                            nxt, rew = index(cell, 4, dest), success
                        elif pas == 4 and TAXI_LOCATIONS[dest] == (r0, c0):
                            nxt, rew = index(cell, dest, dest), success
                    elif a != 4:
                        r1, c1 = _move(r0, c0, a)
                        nxt = index(r1 * 5 + c1, pas, dest)
                    rows.append(s * _N_ACTIONS + a)
                    cols.append(nxt)
                    vals.append(1.0)
                    R[s, a] = rew
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n_states * _N_ACTIONS, n_states))
    return P, R, terminal, d0 / d0.sum()


def _presence_flip_matrix(q: float) -> np.ndarray:
    F = np.empty((16, 16))
    for b in range(16):
        for b2 in range(16):
            h = bin(b ^ b2).count("1")
            F[b, b2] = q**h * (1.0 - q) ** (4 - h)
    return F


def _stochastic_taxi_base(spec: TaxiSpec):
    """Stochastic layout with passenger dynamics but no action noise."""
    n_states = 25 * 16 * 5
    rows, cols, vals = [], [], []
    R = np.zeros((n_states, _N_ACTIONS))
    success = spec.pickup_reward + spec.reward_shift
    step = spec.step_reward + spec.reward_shift

    def index(cell, bits, status):
        return (cell * 16 + bits) * 5 + status

    loc_index = {loc: i for i, loc in enumerate(TAXI_LOCATIONS)}
    for cell in range(25):
        r0, c0 = divmod(cell, 5)
        here = loc_index.get((r0, c0))
        for bits in range(16):
            for status in range(5):
                s = index(cell, bits, status)
                for a in range(_N_ACTIONS):
                    row = s * _N_ACTIONS + a
                    rew = step
                    outcomes = [(s, 1.0)]
                    if a == _PICKUP and here is not None:
                        if status > 0 and status - 1 == here:
                            outcomes = [(index(cell, bits, 0), 1.0)]
                            rew = success
                        elif status == 0 and bits >> here & 1:
                            left = bits & ~(1 << here)
                            dests = [d for d in range(4) if d != here]
                            outcomes = [(index(cell, left, 1 + d), 1.0 / 3.0) for d in dests]
                            rew = success
                    elif a < 4:
                        r1, c1 = _move(r0, c0, a)
                        outcomes = [(index(r1 * 5 + c1, bits, status), 1.0)]
                    for nxt, p in outcomes:
                        rows.append(row)
                        cols.append(nxt)
                        vals.append(p)
                    R[s, a] = rew
    B = sp.csr_matrix((vals, (rows, cols)), shape=(n_states * _N_ACTIONS, n_states))
    flips = sp.kron(sp.identity(25), sp.kron(sp.csr_matrix(_presence_flip_matrix(spec.spawn_prob)), sp.identity(5)))
    P = sp.csr_matrix(B @ flips)
    d0 = np.zeros(n_states)
    for cell in range(25):
        for bits in range(16):
            d0[index(cell, bits, 0)] = 1.0
    return P, R, np.zeros(n_states, dtype=bool), d0 / d0.sum()


def _fold_action_noise(P, R, p_rand: float):
    n_states = R.shape[0]
    avg = sp.kron(sp.identity(n_states), np.full((_N_ACTIONS, _N_ACTIONS), 1.0 / _N_ACTIONS))
    P_noisy = sp.csr_matrix((1.0 - p_rand) * P + p_rand * (avg @ P))
    R_noisy = (1.0 - p_rand) * R + p_rand * R.mean(axis=1, keepdims=True)
    return P_noisy, R_noisy


def build_taxi(spec: TaxiSpec = TaxiSpec()) -> TabularMdp:
    """Build the exact tabular Taxi MDP described by ``spec``."""
    spec.validate()
    if spec.variant == "classic":
        P, R, terminal, d0 = _classic_taxi(spec)
    else:
        P, R, terminal, d0 = _stochastic_taxi_base(spec)
        if spec.p_rand > 0:
            P, R = _fold_action_noise(P, R, spec.p_rand)
    P.sum_duplicates()
    # row sums drift by a few ulps after the sparse products
    P = sp.csr_matrix(sp.diags(1.0 / np.asarray(P.sum(axis=1)).ravel()) @ P)
    r_max = spec.pickup_reward + spec.reward_shift
    return TabularMdp(P, R, spec.gamma, d0, terminal, r_max=r_max)


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    terminal: bool


@dataclass(eq=False)
class TransitionDataset:
    """Ordered offline transitions stored column-wise, plus metadata."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.int64)
        self.a = np.asarray(self.a, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.s_next = np.asarray(self.s_next, dtype=np.int64)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        n = self.s.shape[0]
        for name in ("a", "r", "s_next", "terminal"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"column {name!r} has length {getattr(self, name).shape} != {n}")
        self.meta = dict(self.meta)
        self.meta["size"] = n
        for arr in (self.s, self.a, self.r, self.s_next, self.terminal):
            arr.setflags(write=False)
        self.validate()

    def validate(self) -> None:
        n_states = self.meta.get("n_states")
        n_actions = self.meta.get("n_actions")
        if len(self) == 0:
            return
        if min(self.s.min(), self.a.min(), self.s_next.min()) < 0:
            raise DataError("negative state or action index")
        if n_states is not None and max(self.s.max(), self.s_next.max()) >= n_states:
            raise DataError("state index out of bounds")
        if n_actions is not None and self.a.max() >= n_actions:
            raise DataError("action index out of bounds")
        if not np.all(np.isfinite(self.r)):
            raise DataError("non-finite reward")

    def __len__(self) -> int:
        return self.s.shape[0]

    def __iter__(self) -> Iterator[Transition]:
        for t in range(len(self)):
            yield self[t]

    def __getitem__(self, t: int) -> Transition:
        return Transition(
            int(self.s[t]), int(self.a[t]), float(self.r[t]), int(self.s_next[t]), bool(self.terminal[t])
        )

    @property
    def transitions(self) -> list[Transition]:
        return list(self)

    @property
    def gamma(self) -> float:
        return float(self.meta["gamma"])

    @property
    def v_max(self) -> float:
        return float(self.meta["r_max"]) / (1.0 - float(self.meta["gamma"]))

    def take(self, rows) -> "TransitionDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return TransitionDataset(
            self.s[rows], self.a[rows], self.r[rows], self.s_next[rows], self.terminal[rows], dict(self.meta)
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.s, self.a, self.r, self.s_next, self.terminal):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def coverage(self) -> dict:
        n_states = self.meta.get("n_states")
        n_actions = self.meta.get("n_actions")
        pairs = np.unique(self.s * (n_actions or (self.a.max() + 1)) + self.a).size
        return {
            "rows": len(self),
            "distinct_states": int(np.unique(self.s).size),
            "distinct_state_actions": int(pairs),
            "n_states": n_states,
            "n_actions": n_actions,
            "terminal_rows": int(self.terminal.sum()),
        }


@dataclass(frozen=True, eq=False)
class BehaviorSpec:
    """Data-collection policy.

    ``trajectory-mix``: each trajectory follows ``expert`` with probability
    ``expert_fraction`` and epsilon-greedy(expert) otherwise.
    ``per-step``: every step is epsilon-greedy(expert).
    """

    expert: Policy
    epsilon: float = 0.5
    mode: str = "trajectory-mix"
    horizon_cap: int = 200
    expert_fraction: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ArgumentError("epsilon must lie in [0, 1]")
        if self.mode not in ("trajectory-mix", "per-step"):
            raise ArgumentError(f"unknown behavior mode {self.mode!r}")
        if self.horizon_cap < 1:
            raise ArgumentError("horizon_cap must be >= 1")
        if not 0.0 <= self.expert_fraction <= 1.0:
            raise ArgumentError("expert_fraction must lie in [0, 1]")

    def descriptor(self) -> str:
        if self.mode == "per-step":
            if self.epsilon == 1.0:
                return "pure-random"
            return f"eps-greedy(eps={self.epsilon:g})"
        if self.expert_fraction == 0.0 and self.epsilon == 1.0:
            return "pure-random"
        return f"trajectory-mix(expert={self.expert_fraction:g}, eps={self.epsilon:g})"


def _cdf_rows(probs: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.cumsum(probs, axis=1))


def generate_dataset(
    mdp: TabularMdp,
    behavior: BehaviorSpec,
    n: int,
    seed: int,
    env_id: str = "mdp",
) -> TransitionDataset:
    """Roll trajectories from ``d0`` until ``n`` transitions are collected.

    Trajectories end at a terminal state or after ``behavior.horizon_cap``
    steps; the last trajectory is cut at ``n``.
    """
    if n < 1:
        raise ArgumentError("n must be >= 1")
    if behavior.expert.n_states != mdp.n_states:
        raise ArgumentError("behavior policy does not match MDP state count")
    rng = np.random.default_rng(seed)
    traj_u = rng.random((n, 2))
    step_u = rng.random((n, 2))
    expert = behavior.expert.probs(mdp.n_actions)
    explore = (1.0 - behavior.epsilon) * expert + behavior.epsilon / mdp.n_actions
    flat = mdp.flat_transition
    s, a, r, s2, term = _kernels.rollout(
        flat.indptr.astype(np.int64),
        flat.indices.astype(np.int64),
        _kernels.row_cumulative(flat),
        mdp.reward.ravel(),
        mdp.terminal_mask,
        np.cumsum(mdp.initial_dist),
        _cdf_rows(expert),
        _cdf_rows(explore),
        traj_u,
        step_u,
        behavior.expert_fraction,
        behavior.mode == "per-step",
        behavior.horizon_cap,
        n,
    )
    meta = {
        "env_id": env_id,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "r_max": mdp.r_max,
        "behavior": behavior.descriptor(),
        "seed": int(seed),
    }
    return TransitionDataset(s, a, r, s2, term, meta)


def subsample(dataset: TransitionDataset, k: int, seed: int) -> TransitionDataset:
    """Uniform order-preserving subsample of ``k`` rows without replacement."""
    if not 1 <= k <= len(dataset):
        raise ArgumentError(f"subsample size must lie in [1, {len(dataset)}], got {k}")
    rows = subsample_rows(len(dataset), k, seed)
    return dataset.take(rows)


def subsample_rows(size: int, k: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(size, size=k, replace=False))


def behavior_for(mdp: TabularMdp, expert: Optional[Policy] = None, **kwargs) -> BehaviorSpec:
    """Behavior spec around ``expert`` (default: greedy policy of Q*)."""
    if expert is None:
        from .mdp import greedy_policy, solve_q_star

        expert = greedy_policy(solve_q_star(mdp))
    return BehaviorSpec(expert=expert, **kwargs)
