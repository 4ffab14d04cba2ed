"""Tabular Fitted-Q Evaluation and BVFT-based selection over (policy, estimate) grids.

The FQE hyperparameters (iteration count, state aggregation, value for
unseen cells) play the role that network architecture plays for neural FQE:
each configuration gives a different, possibly biased, estimate of Q^pi.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import bvft
from .candidates import CandidateEval, eval_cache_from_table
from .envs import TransitionDataset
from .exceptions import ArgumentError
from .mdp import Policy

__all__ = [
    "FqeConfig",
    "OpeCandidate",
    "fqe",
    "run_ope_grid",
    "strategy1_rank",
    "strategy2_rank",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FqeConfig:
    iterations: int
    aggregation_factor: int = 1
    unseen_default: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.iterations < 1:
            raise ArgumentError("iterations must be >= 1")
        if self.aggregation_factor < 1:
            raise ArgumentError("aggregation_factor must be >= 1")
        if not np.isfinite(self.unseen_default) or self.unseen_default < 0:
            raise ArgumentError("unseen_default must be a finite non-negative value")
        if not self.label:
            object.__setattr__(
                self, "label", f"k{self.iterations}-agg{self.aggregation_factor}-u{self.unseen_default:g}"
            )


@dataclass(frozen=True, eq=False)
class OpeCandidate:
    policy_index: int
    ope_index: int
    q_estimate: np.ndarray
    eval: CandidateEval
    label: str = ""


def _shape(dataset: TransitionDataset, policy: Policy) -> tuple[int, int]:
    n_states = dataset.meta.get("n_states", policy.n_states)
    n_actions = dataset.meta.get("n_actions")
    if n_actions is None:
        n_actions = policy.table.shape[1] if policy.kind == "stochastic" else int(dataset.a.max()) + 1
    return int(n_states), int(n_actions)


def fqe(
    dataset: TransitionDataset,
    policy: Policy,
    config: FqeConfig,
    gamma: Optional[float] = None,
) -> np.ndarray:
    """Estimate Q^pi by ``config.iterations`` rounds of per-cell regression.

    States are bucketed by ``s // aggregation_factor``. Each round replaces
    every visited (bucket, action) cell by the mean of
    ``r + gamma * (1 - terminal) * E_{a'~pi(s')} Q(bucket(s'), a')`` over the
    rows that land in it; unvisited cells hold ``unseen_default``. Starts
    from a zero table and returns it expanded to one row per state.
    """
    if len(dataset) == 0:
        raise ArgumentError("FQE needs a non-empty dataset")
    if gamma is None:
        gamma = dataset.gamma
    n_states, n_actions = _shape(dataset, policy)
    if policy.n_states != n_states:
        raise ArgumentError("policy does not match the dataset's state count")
    agg = config.aggregation_factor
    n_buckets = -(-n_states // agg)
    cell = (dataset.s // agg) * n_actions + dataset.a
    n_cells = n_buckets * n_actions
    counts = np.bincount(cell, minlength=n_cells)
    seen = counts > 0
    reward_sum = np.bincount(cell, weights=dataset.r, minlength=n_cells)
    next_bucket = dataset.s_next // agg
    next_probs = policy.probs(n_actions)[dataset.s_next]
    live = gamma * (~dataset.terminal)

    qb = np.zeros((n_buckets, n_actions))
    for _ in range(config.iterations):
        v_next = np.einsum("ij,ij->i", next_probs, qb[next_bucket])
        sums = reward_sum + np.bincount(cell, weights=live * v_next, minlength=n_cells)
        flat = np.full(n_cells, float(config.unseen_default))
        flat[seen] = sums[seen] / counts[seen]
        qb = flat.reshape(n_buckets, n_actions)
    return qb[np.arange(n_states) // agg]


def run_ope_grid(
    dataset: TransitionDataset,
    policies: Sequence[Policy],
    configs: Sequence[FqeConfig],
    gamma: Optional[float] = None,
    failures: Optional[list] = None,
) -> list[OpeCandidate]:
    """Fit every (policy i, config l) cell, in i-major order.

    A failing cell is logged and skipped; its ``(i, l, error)`` triple is
    appended to ``failures`` when given.
    """
    v_max = dataset.v_max if "r_max" in dataset.meta and "gamma" in dataset.meta else None
    out = []
    for i, pol in enumerate(policies):
        for l, cfg in enumerate(configs):
            label = f"fqe:{cfg.label}:policy{i}"
            try:
                q = fqe(dataset, pol, cfg, gamma)
                ev = eval_cache_from_table(q, dataset, "policy", pol, v_max, label)
            except Exception as exc:
                log.warning("OPE cell (%d, %d) failed: %s", i, l, exc)
                if failures is not None:
                    failures.append((i, l, exc))
                continue
            out.append(OpeCandidate(i, l, q, ev, label))
    return out


def _n_policies(cands: Sequence[OpeCandidate]) -> int:
    if not cands:
        raise ArgumentError("no OPE candidates")
    return max(c.policy_index for c in cands) + 1


def strategy1_rank(
    ope_candidates: Sequence[OpeCandidate],
    dataset: TransitionDataset,
    grid: bvft.ResolutionGrid,
    gamma: Optional[float] = None,
    lam: Optional[float] = None,
) -> bvft.SelectionResult:
    """Rank policies by the best position any of their estimates reaches under BVFT-PE-Q.

    ``final_loss[i]`` is that best (0-based) position; policies with no
    surviving estimate get ``inf``.
    """
    m = _n_policies(ope_candidates)
    pooled = bvft.bvft_pe_q_rank([c.eval for c in ope_candidates], dataset, grid, gamma, lam)
    position = np.empty(len(ope_candidates), dtype=np.int64)
    position[pooled.ranking] = np.arange(len(ope_candidates))
    best = np.full(m, np.inf)
    for c, pos in zip(ope_candidates, position):
        best[c.policy_index] = min(best[c.policy_index], float(pos))
    diagnostics = {
        "pair_ranking": pooled.ranking,
        "pair_scores": pooled.final_loss,
        "pair_labels": [c.label for c in ope_candidates],
    }
    return bvft._result(best, "strategy1", diagnostics=diagnostics)


def strategy2_rank(
    ope_candidates: Sequence[OpeCandidate],
    dataset: TransitionDataset,
    grid: bvft.ResolutionGrid,
    gamma: Optional[float] = None,
) -> bvft.SelectionResult:
    """Per policy, keep the estimate BVFT-PE prefers; rank policies by its average Q.

    ``final_loss`` holds the negated average Q of the selected estimates, so
    ascending order is descending predicted value.
    """
    m = _n_policies(ope_candidates)
    scores = np.full(m, np.inf)
    selected = np.full(m, -1, dtype=np.int64)
    selected_loss = np.full(m, np.nan)
    for i in range(m):
        own = [c for c in ope_candidates if c.policy_index == i]
        if not own:
            continue
        res = bvft.bvft_pe_rank([c.eval for c in own], dataset, grid, gamma)
        pick = own[int(res.ranking[0])]
        selected[i] = pick.ope_index
        selected_loss[i] = res.final_loss[res.ranking[0]]
        scores[i] = -bvft.avg_q(pick.eval)
    diagnostics = {"selected_ope_index": selected, "selected_loss": selected_loss}
    return bvft._result(scores, "strategy2", diagnostics=diagnostics)
