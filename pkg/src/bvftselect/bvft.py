"""BVFT-family selection losses.

For a pair of candidates (i, j), the dataset rows are partitioned by the
discretized outputs of both candidates. The projected Bellman backup of
candidate i onto that piecewise-constant class is the per-group mean of the
one-sample targets ``r + gamma * backup_i``; the pairwise loss is the RMS
gap between ``Q_i(s,a)`` and that projection. A candidate's loss at one
resolution is its worst pairwise loss, and the final loss is the minimum
over the resolution grid.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import _kernels
from .candidates import CandidateEval, CandidatePair, eval_cache_from_table
from .envs import TransitionDataset
from .exceptions import ArgumentError, DataError
from .mdp import (
    Policy,
    TabularMdp,
    bellman_optimality_backup,
    bellman_policy_backup,
    solve_q_star,
)

__all__ = [
    "ResolutionGrid",
    "PartitionIndex",
    "LossTable",
    "SelectionResult",
    "DegenerateResolutionWarning",
    "DEGENERATE_MODES",
    "discretize",
    "build_partition",
    "projected_backup",
    "pairwise_loss",
    "bvft_rank",
    "bvft_pe_rank",
    "bvft_pe_q_rank",
    "one_sample_br",
    "br1_rank",
    "avg_q",
    "avgq_rank",
    "random_rank",
    "skyline_losses",
    "fixed_resolution_rankings",
    "exact_partition",
    "exact_projected_operator",
    "exact_pairwise_loss",
    "exact_bvft_rank",
]


class DegenerateResolutionWarning(UserWarning):
    """The loss-minimising resolution lumps every row into a single group."""


DEGENERATE_MODES = ("exclude", "keep")


@dataclass(frozen=True)
class ResolutionGrid:
    """Strictly increasing positive discretization widths, in Q-value units."""

    resolutions: tuple

    def __post_init__(self):
        res = tuple(float(x) for x in self.resolutions)
        if not res:
            raise ArgumentError("resolution grid is empty")
        if min(res) <= 0 or any(b <= a for a, b in zip(res, res[1:])):
            raise ArgumentError("resolutions must be positive and strictly increasing")
        object.__setattr__(self, "resolutions", res)

    @classmethod
    def default(cls, v_max: float, points: int = 10) -> "ResolutionGrid":
        """``V_max / 512 * 2**k`` for ``k = 0 .. points-1``."""
        base = v_max / 512.0
        return cls(tuple(base * 2.0**k for k in range(points)))

    @classmethod
    def geometric(cls, lo: float, hi: float, points: int) -> "ResolutionGrid":
        if points == 1:
            return cls((float(lo),))
        return cls(tuple(np.geomspace(lo, hi, points)))

    def __len__(self) -> int:
        return len(self.resolutions)

    def __iter__(self):
        return iter(self.resolutions)


@dataclass(frozen=True, eq=False)
class PartitionIndex:
    group_of_row: np.ndarray
    n_groups: int
    resolution: float
    pair: tuple

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_of_row, minlength=self.n_groups)


@dataclass(eq=False)
class LossTable:
    """All pairwise losses of one run.

    ``pair_losses[k, i, j]`` is the loss of candidate i against j at
    ``resolutions[k]``; ``losses[k, i]`` is the max over j.

    A resolution is degenerate for candidate i when every (i, j) partition is
    a single group, which makes it equivalent to an infinitely coarse one.
    With ``degenerate="exclude"`` such resolutions are skipped when picking
    each candidate's resolution, unless all of them are degenerate.
    ``pair_groups`` entries below 1 mean "unknown" and never count as
    degenerate.
    """

    resolutions: np.ndarray
    pair_losses: np.ndarray
    pair_groups: np.ndarray
    singleton_fraction: np.ndarray
    labels: list = field(default_factory=list)
    degenerate: str = "exclude"

    def __post_init__(self):
        if self.degenerate not in DEGENERATE_MODES:
            raise ArgumentError(f"degenerate must be one of {DEGENERATE_MODES}")

    @property
    def losses(self) -> np.ndarray:
        return self.pair_losses.max(axis=2)

    @property
    def single_group(self) -> np.ndarray:
        """``(K, m)`` mask of resolutions where all of candidate i's partitions are one group."""
        return np.all(self.pair_groups == 1, axis=2)

    @property
    def admissible(self) -> np.ndarray:
        if self.degenerate == "keep":
            return np.ones(self.losses.shape, dtype=bool)
        ok = ~self.single_group
        ok[:, ~ok.any(axis=0)] = True
        return ok

    @property
    def chosen_index(self) -> np.ndarray:
        # argmin returns the first minimiser, i.e. the finest tied resolution
        return np.argmin(np.where(self.admissible, self.losses, np.inf), axis=0)

    @property
    def chosen_resolution(self) -> np.ndarray:
        return self.resolutions[self.chosen_index]

    @property
    def final(self) -> np.ndarray:
        return self.losses[self.chosen_index, np.arange(self.losses.shape[1])]

    def curve(self, i: int) -> list:
        return [[float(e), float(l)] for e, l in zip(self.resolutions, self.losses[:, i])]


@dataclass(eq=False)
class SelectionResult:
    """Ranking of candidates by ascending ``final_loss`` (ties by index)."""

    ranking: np.ndarray
    final_loss: np.ndarray
    method: str
    diagnostics: dict = field(default_factory=dict)
    labels: list = field(default_factory=list)
    loss_table: Optional[LossTable] = None

    def to_dict(self) -> dict:
        m = len(self.final_loss)
        labels = self.labels or [str(i) for i in range(m)]
        table = self.loss_table
        per = []
        for i in range(m):
            entry = {"index": i, "label": labels[i], "final_loss": float(self.final_loss[i])}
            if table is not None:
                entry["chosen_resolution"] = float(table.chosen_resolution[i])
                entry["curve"] = table.curve(i)
            per.append(entry)
        out = {
            "method": self.method,
            "grid": [] if table is None else [float(x) for x in table.resolutions],
            "per_candidate": per,
            "ranking": [int(x) for x in self.ranking],
        }
        if self.diagnostics:
            out["diagnostics"] = _jsonable(self.diagnostics)
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _rank(scores) -> np.ndarray:
    return np.argsort(np.asarray(scores, dtype=np.float64), kind="stable")


def _result(scores, method, labels=(), **kwargs) -> SelectionResult:
    scores = np.asarray(scores, dtype=np.float64)
    return SelectionResult(_rank(scores), scores, method, labels=list(labels), **kwargs)


# --------------------------------------------------------------------------
# discretization and partitions


def discretize(values, resolution: float) -> np.ndarray:
    """Bin ids ``floor(v / resolution)``; with ``resolution == 0`` equal values share an id."""
    values = np.asarray(values, dtype=np.float64)
    if resolution < 0:
        raise ArgumentError("resolution must be >= 0")
    if resolution == 0:
        return np.unique(values, return_inverse=True)[1].astype(np.int64).reshape(values.shape)
    return np.floor(values / resolution).astype(np.int64)


def _dense_ids(bins: np.ndarray) -> tuple[np.ndarray, int]:
    """Relabel integer bins onto ``0 .. n-1`` (order-preserving)."""
    if bins.size == 0:
        return bins, 0
    lo = bins.min()
    span = int(bins.max() - lo) + 1
    if span <= 4 * bins.size + 1024:
        shifted = bins - lo
        present = np.zeros(span, dtype=np.int64)
        present[shifted] = 1
        ids = np.cumsum(present) - 1
        return ids[shifted], int(ids[-1] + 1)
    uniq, inv = np.unique(bins, return_inverse=True)
    return inv.astype(np.int64), uniq.size


_KEY_CAP = 1 << 22


def _pair_keys(bi, ni, bj, nj, compress: bool = False) -> tuple[np.ndarray, int]:
    """Group key per row for the product of two binnings.

    Keys lie in ``[0, n)`` for the returned ``n``; with ``compress`` (or when
    ``ni * nj`` is large) they are relabelled onto the distinct keys present.
    """
    size = ni * nj
    key = bi * nj + bj
    if not compress and size <= max(_KEY_CAP, 4 * bi.size):
        return key, size
    uniq, inv = np.unique(key, return_inverse=True)
    return inv.astype(np.int64).reshape(key.shape), uniq.size


def _check_lengths(*arrays) -> int:
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise DataError("cache and dataset lengths disagree")
    if n == 0:
        raise DataError("empty dataset")
    return n


def build_partition(eval_i: CandidateEval, eval_j: CandidateEval, resolution: float, pair=(0, 1)) -> PartitionIndex:
    """Group rows whose discretized values agree under both candidates.

    Group ids are numbered in order of first occurrence.
    """
    _check_lengths(eval_i.qa, eval_j.qa)
    bi, ni = _dense_ids(discretize(eval_i.qa, resolution))
    bj, nj = _dense_ids(discretize(eval_j.qa, resolution))
    key = bi * nj + bj
    _, first, inv = np.unique(key, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    relabel = np.empty_like(order)
    relabel[order] = np.arange(order.size)
    return PartitionIndex(relabel[inv].astype(np.int64), int(order.size), float(resolution), tuple(pair))


def _targets(ev: CandidateEval, dataset: TransitionDataset, gamma: float) -> np.ndarray:
    return dataset.r + gamma * ev.backup


def projected_backup(
    partition: PartitionIndex,
    eval_target: CandidateEval,
    dataset: TransitionDataset,
    gamma: float,
) -> np.ndarray:
    """Per-row group mean of the one-sample targets ``r + gamma * backup``."""
    _check_lengths(partition.group_of_row, eval_target.qa, dataset.r)
    y = _targets(eval_target, dataset, gamma)
    g = partition.group_of_row
    sums = np.bincount(g, weights=y, minlength=partition.n_groups)
    counts = np.bincount(g, minlength=partition.n_groups)
    return (sums / np.maximum(counts, 1))[g]


def pairwise_loss(
    eval_i: CandidateEval,
    eval_j: CandidateEval,
    dataset: TransitionDataset,
    resolution: float,
    gamma: float,
) -> float:
    """RMS distance between ``Q_i`` and its projected backup on the (i, j) partition."""
    part = build_partition(eval_i, eval_j, resolution)
    proj = projected_backup(part, eval_i, dataset, gamma)
    return float(np.sqrt(np.mean((eval_i.qa - proj) ** 2)))


# --------------------------------------------------------------------------
# ranking


def _loss_table(
    evals: Sequence[CandidateEval],
    dataset: TransitionDataset,
    resolutions: Sequence[float],
    gamma: float,
    partition_qa: Optional[np.ndarray] = None,
    n_jobs: int = 1,
    degenerate: str = "exclude",
) -> LossTable:
    m = len(evals)
    n = _check_lengths(dataset.r, *[e.qa for e in evals])
    qas = np.ascontiguousarray(np.stack([e.qa for e in evals]))
    targets = np.ascontiguousarray(np.stack([_targets(e, dataset, gamma) for e in evals]))
    K = len(resolutions)
    losses = np.empty((K, m, m))
    groups = np.empty((K, m, m), dtype=np.int64)
    singles = np.empty((K, m, m))

    def fill(k: int) -> None:
        eps = resolutions[k]
        if partition_qa is not None:
            # the partition does not depend on j
            key, n_groups = _dense_ids(discretize(partition_qa, eps))
            sums = np.zeros(n_groups)
            counts = np.zeros(n_groups, dtype=np.int64)
            for i in range(m):
                out = _kernels.group_loss(key, n_groups, qas[i], targets[i], sums, counts)
                losses[k, i, :], groups[k, i, :], singles[k, i, :] = out
            return
        dense = [_dense_ids(discretize(q, eps)) for q in qas]
        n_bins = np.array([nb for _, nb in dense], dtype=np.int64)
        top = int(n_bins.max())
        if top * top <= max(_KEY_CAP, 4 * n):
            sums = np.zeros(top * top)
            counts = np.zeros(top * top, dtype=np.int64)
            bins = np.ascontiguousarray(np.stack([b for b, _ in dense]))
            _kernels.pair_table(bins, n_bins, qas, targets, sums, counts, losses[k], groups[k], singles[k])
            return
        # too many bin pairs for a direct key: compress each pair's keys first
        sums = np.zeros(n)
        counts = np.zeros(n, dtype=np.int64)
        for i in range(m):
            for j in range(m):
                key, n_groups = _pair_keys(dense[i][0], dense[i][1], dense[j][0], dense[j][1], compress=True)
                out = _kernels.group_loss(key, n_groups, qas[i], targets[i], sums, counts)
                losses[k, i, j], groups[k, i, j], singles[k, i, j] = out

    if n_jobs > 1 and K > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            list(pool.map(fill, range(K)))
    else:
        for k in range(K):
            fill(k)
    return LossTable(
        np.asarray(resolutions, dtype=np.float64),
        losses,
        groups,
        singles,
        [e.label for e in evals],
        degenerate,
    )


def _bvft_common(evals, dataset, grid, gamma, method, n_jobs, degenerate) -> tuple[SelectionResult, LossTable]:
    if len(evals) == 0:
        raise ArgumentError("need at least one candidate")
    if not isinstance(grid, ResolutionGrid):
        grid = ResolutionGrid(tuple(grid))
    if gamma is None:
        gamma = dataset.gamma
    table = _loss_table(evals, dataset, grid.resolutions, gamma, n_jobs=n_jobs, degenerate=degenerate)
    chosen = table.chosen_index
    cols = np.arange(len(evals))
    unconstrained = np.argmin(table.losses, axis=0)
    # candidates whose loss is minimised by a single-group resolution, whether
    # or not that resolution was then skipped
    flagged = [int(i) for i in cols if table.single_group[unconstrained[i], i]]
    if flagged:
        action = "kept" if degenerate == "keep" else "skipped"
        warnings.warn(
            f"{method}: all-in-one-group resolution minimises the loss of candidates {flagged} ({action})",
            DegenerateResolutionWarning,
            stacklevel=3,
        )
    diagnostics = {
        "chosen_resolution": table.chosen_resolution,
        "curves": table.losses.T,
        "degenerate": flagged,
        "degenerate_mode": degenerate,
        "singleton_fraction": table.singleton_fraction[chosen, np.arange(len(evals))].max(axis=1),
    }
    result = _result(table.final, method, table.labels, diagnostics=diagnostics, loss_table=table)
    return result, table


def _as_evals(items, mode: str, who: str) -> list[CandidateEval]:
    evals = []
    for item in items:
        ev = item[1] if isinstance(item, tuple) else item
        if not isinstance(ev, CandidateEval):
            raise ArgumentError(f"{who} expects CandidateEval caches")
        if ev.mode != mode:
            raise ArgumentError(f"{who} needs {mode}-mode caches, got {ev.mode!r}")
        evals.append(ev)
    return evals


def bvft_rank(
    evals: Sequence[CandidateEval],
    dataset: TransitionDataset,
    grid: ResolutionGrid,
    gamma: Optional[float] = None,
    n_jobs: int = 1,
    degenerate: str = "exclude",
) -> tuple[SelectionResult, LossTable]:
    """BVFT with automatic resolution selection over ``grid``.

    ``degenerate`` controls single-group resolutions; see ``LossTable``.
    """
    evals = _as_evals(evals, "greedy", "bvft_rank")
    return _bvft_common(evals, dataset, grid, gamma, "bvft", n_jobs, degenerate)


def bvft_pe_rank(
    pairs: Sequence[Union[tuple, CandidateEval]],
    dataset: TransitionDataset,
    grid: ResolutionGrid,
    gamma: Optional[float] = None,
    n_jobs: int = 1,
    degenerate: str = "exclude",
) -> SelectionResult:
    """BVFT-PE: same pipeline with each candidate's own policy backup.

    ``pairs`` holds ``(policy, cache)`` tuples (or bare caches) whose caches
    were built in policy mode.
    """
    evals = _as_evals(pairs, "policy", "bvft_pe_rank")
    return _bvft_common(evals, dataset, grid, gamma, "bvft-pe", n_jobs, degenerate)[0]


def bvft_pe_q_rank(
    pairs,
    dataset: TransitionDataset,
    grid: ResolutionGrid,
    gamma: Optional[float] = None,
    lam: Optional[float] = None,
    n_jobs: int = 1,
    degenerate: str = "exclude",
) -> SelectionResult:
    """BVFT-PE loss minus ``lam`` times the candidate's mean Q on the data.

    ``lam`` defaults to ``1 / V_max``.
    """
    if lam is None:
        lam = 1.0 / dataset.v_max
    if lam < 0:
        raise ArgumentError("lambda must be >= 0")
    pe = bvft_pe_rank(pairs, dataset, grid, gamma, n_jobs, degenerate)
    means = np.array([avg_q(e) for e in _as_evals(pairs, "policy", "bvft_pe_q_rank")])
    scores = pe.final_loss - lam * means
    diagnostics = dict(pe.diagnostics, pe_loss=pe.final_loss, avg_q=means, lam=lam)
    return _result(scores, "bvft-pe-q", pe.labels, diagnostics=diagnostics, loss_table=pe.loss_table)


def one_sample_br(ev: CandidateEval, dataset: TransitionDataset, gamma: Optional[float] = None) -> float:
    """Mean squared TD error ``(Q(s,a) - r - gamma * backup)^2`` over the data."""
    if gamma is None:
        gamma = dataset.gamma
    _check_lengths(ev.qa, dataset.r)
    return float(np.mean((ev.qa - _targets(ev, dataset, gamma)) ** 2))


def br1_rank(evals, dataset: TransitionDataset, gamma: Optional[float] = None) -> SelectionResult:
    if len(evals) == 0:
        raise ArgumentError("need at least one candidate")
    scores = [one_sample_br(e, dataset, gamma) for e in evals]
    return _result(scores, "br1", [e.label for e in evals])


def avg_q(ev: CandidateEval) -> float:
    return float(np.mean(ev.qa))


def avgq_rank(evals) -> SelectionResult:
    """Descending mean predicted value; ``final_loss`` holds the negated means."""
    if len(evals) == 0:
        raise ArgumentError("need at least one candidate")
    return _result([-avg_q(e) for e in evals], "avgq", [e.label for e in evals])


def random_rank(m: int, seed) -> SelectionResult:
    if m < 1:
        raise ArgumentError("m must be >= 1")
    perm = np.random.default_rng(seed).permutation(m)
    scores = np.empty(m)
    scores[perm] = np.arange(m, dtype=np.float64)
    return SelectionResult(perm, scores, "random")


# --------------------------------------------------------------------------
# oracle skylines


def fixed_resolution_rankings(table: LossTable, method: str = "bvft") -> list[SelectionResult]:
    """One ranking per grid resolution, scoring candidates by that resolution alone."""
    return [
        _result(table.losses[k], f"{method}@{table.resolutions[k]:.6g}", table.labels)
        for k in range(len(table.resolutions))
    ]


def skyline_losses(
    mdp: TabularMdp,
    candidates: Sequence[CandidatePair],
    dataset: TransitionDataset,
    grid: ResolutionGrid,
    q_star: Optional[np.ndarray] = None,
    evals: Optional[Sequence[CandidateEval]] = None,
    table: Optional[LossTable] = None,
    degenerate: str = "exclude",
) -> dict:
    """Oracle-assisted reference rankings.

    Returns ``qstar-distance`` (RMS gap to Q* on the data), ``bellman-error``
    (RMS exact Bellman residual on the data), ``bvft-skyline`` (BVFT with every
    partition built from Q*'s values) and ``bvft-res`` (one ranking per fixed
    resolution, for hindsight selection).
    """
    if q_star is None:
        q_star = solve_q_star(mdp)
    v_max = mdp.v_max
    tables = [np.clip(c.q, 0.0, v_max) for c in candidates]
    labels = [c.label for c in candidates]
    s, a = dataset.s, dataset.a
    dist = [float(np.sqrt(np.mean((q[s, a] - q_star[s, a]) ** 2))) for q in tables]
    bellman = [
        float(np.sqrt(np.mean((q[s, a] - bellman_optimality_backup(mdp, q)[s, a]) ** 2))) for q in tables
    ]
    if evals is None:
        evals = [eval_cache_from_table(q, dataset, "greedy", label=lab) for q, lab in zip(tables, labels)]
    star_qa = q_star[s, a]
    sky_table = _loss_table(
        evals, dataset, grid.resolutions, dataset.gamma, partition_qa=star_qa, degenerate=degenerate
    )
    if table is None:
        table = _loss_table(evals, dataset, grid.resolutions, dataset.gamma, degenerate=degenerate)
    return {
        "qstar-distance": _result(dist, "qstar-distance", labels),
        "bellman-error": _result(bellman, "bellman-error", labels),
        "bvft-skyline": _result(sky_table.final, "bvft-skyline", labels, loss_table=sky_table),
        "bvft-res": fixed_resolution_rankings(table),
    }


# --------------------------------------------------------------------------
# model-based (exact expectation) projected operator over the full table


def exact_partition(q_i, q_j, resolution: float) -> np.ndarray:
    """``(S, A)`` group labels from the joint discretization of two Q-tables."""
    q_i = np.asarray(q_i, dtype=np.float64)
    bi, ni = _dense_ids(discretize(q_i.ravel(), resolution))
    bj, nj = _dense_ids(discretize(np.asarray(q_j, dtype=np.float64).ravel(), resolution))
    return np.unique(bi * nj + bj, return_inverse=True)[1].reshape(q_i.shape)


def exact_projected_operator(
    mdp: TabularMdp,
    labels,
    weights,
    q,
    policy: Optional[Policy] = None,
) -> np.ndarray:
    """``mu``-weighted group average of the exact Bellman backup of ``q``.

    With ``policy`` given the policy backup is projected instead of the
    optimality backup. ``weights`` must be strictly positive.
    """
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    q = mdp.check_q(q)
    if labels.shape != q.shape or w.shape != q.shape:
        raise ArgumentError("labels and weights must match the Q-table shape")
    if w.min() <= 0:
        raise ArgumentError("weights must be fully supported")
    tq = bellman_optimality_backup(mdp, q) if policy is None else bellman_policy_backup(mdp, policy, q)
    g = labels.ravel()
    sums = np.bincount(g, weights=(w * tq).ravel())
    mass = np.bincount(g, weights=w.ravel())
    return (sums / mass)[g].reshape(q.shape)


def exact_pairwise_loss(
    mdp: TabularMdp,
    q_i,
    q_j,
    weights,
    resolution: float,
    policy: Optional[Policy] = None,
) -> float:
    """``||Q_i - T_G Q_i||_{2, mu}`` with the exact operator on the (i, j) partition."""
    q_i = mdp.check_q(q_i)
    w = np.asarray(weights, dtype=np.float64)
    labels = exact_partition(q_i, q_j, resolution)
    proj = exact_projected_operator(mdp, labels, w, q_i, policy)
    return float(np.sqrt(np.sum(w * (q_i - proj) ** 2) / np.sum(w)))


def exact_bvft_rank(
    mdp: TabularMdp,
    q_tables: Sequence[np.ndarray],
    weights,
    resolutions: Sequence[float],
    policies: Optional[Sequence[Policy]] = None,
) -> SelectionResult:
    """BVFT (or BVFT-PE when ``policies`` is given) with exact expectations.

    ``resolutions`` may include 0, meaning partitions by exact value equality.
    """
    m = len(q_tables)
    if m == 0:
        raise ArgumentError("need at least one candidate")
    losses = np.empty((len(resolutions), m, m))
    for k, eps in enumerate(resolutions):
        for i in range(m):
            pol = None if policies is None else policies[i]
            for j in range(m):
                losses[k, i, j] = exact_pairwise_loss(mdp, q_tables[i], q_tables[j], weights, eps, pol)
    table = LossTable(
        np.asarray(resolutions, dtype=np.float64),
        losses,
        np.full(losses.shape, -1, dtype=np.int64),
        np.zeros(losses.shape),
    )
    method = "exact-bvft" if policies is None else "exact-bvft-pe"
    return _result(table.final, method, loss_table=table)
