"""Ground-truth scoring of rankings and the repeated-subsampling experiment harness."""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import bvft
from .candidates import CandidateEval, CandidatePair, build_eval_cache
from .envs import TransitionDataset, subsample_rows
from .exceptions import ArgumentError, ConfigurationError
from .mdp import TabularMdp, bellman_optimality_backup, solve_q_star

__all__ = [
    "METHODS",
    "ExperimentConfig",
    "MetricSummary",
    "topk_regret",
    "topk_precision",
    "run_experiment",
    "summarize",
]

log = logging.getLogger(__name__)

METHODS = (
    "bvft",
    "bvft-pe",
    "bvft-pe-q",
    "br1",
    "avgq",
    "random",
    "skyline-qstar",
    "skyline-bellman",
    "bvft-skyline",
    "bvft-best-res",
)


def _check_ranking(ranking, true_values, k: int) -> tuple[np.ndarray, np.ndarray]:
    ranking = np.asarray(ranking, dtype=np.int64)
    values = np.asarray(true_values, dtype=np.float64)
    m = values.shape[0]
    if ranking.shape != (m,) or not np.array_equal(np.sort(ranking), np.arange(m)):
        raise ArgumentError("ranking must be a permutation of the candidate indices")
    if not 1 <= k <= m:
        raise ArgumentError(f"k must lie in [1, {m}], got {k}")
    return ranking, values


def topk_regret(ranking, true_values, k: int) -> float:
    """Normalized gap between the best candidate overall and the best of the top k."""
    ranking, values = _check_ranking(ranking, true_values, k)
    hi, lo = values.max(), values.min()
    if hi == lo:
        return 0.0
    return float((hi - values[ranking[:k]].max()) / (hi - lo))


def topk_precision(ranking, true_values, k: int) -> float:
    """Fraction of the true top k (ties by index) found in the first k ranked."""
    ranking, values = _check_ranking(ranking, true_values, k)
    true_top = np.lexsort((np.arange(values.shape[0]), -values))[:k]
    return len(set(true_top.tolist()) & set(ranking[:k].tolist())) / k


@dataclass
class ExperimentConfig:
    n_repetitions: int = 200
    subsample_size: int = 50_000
    candidates_per_run: int = 10
    k_values: tuple = (1, 2, 3)
    seed: int = 0
    methods: tuple = ("bvft", "br1", "avgq", "random")
    grid_points: int = 10
    grid_min: Optional[float] = None
    grid_max: Optional[float] = None
    lam: Optional[float] = None
    degenerate: str = "exclude"

    def __post_init__(self):
        self.k_values = tuple(int(k) for k in self.k_values)
        self.methods = tuple(self.methods)

    def validate(self, n_candidates: Optional[int] = None, dataset_size: Optional[int] = None) -> None:
        bad = []
        if self.n_repetitions < 1:
            bad.append("n_repetitions")
        if self.subsample_size < 1 or (dataset_size is not None and self.subsample_size > dataset_size):
            bad.append("subsample_size")
        m = self.candidates_per_run
        if m < 1 or (n_candidates is not None and m > n_candidates):
            bad.append("candidates_per_run")
        if not self.k_values or any(not 1 <= k <= m for k in self.k_values):
            bad.append("k_values")
        if not self.methods or any(x not in METHODS for x in self.methods):
            bad.append("methods")
        if self.grid_points < 1:
            bad.append("grid_points")
        if (self.grid_min is None) != (self.grid_max is None):
            bad.append("grid_min" if self.grid_min is None else "grid_max")
        elif self.grid_min is not None and not 0 < self.grid_min <= self.grid_max:
            bad.append("grid_min")
        if self.lam is not None and self.lam < 0:
            bad.append("lam")
        if self.degenerate not in bvft.DEGENERATE_MODES:
            bad.append("degenerate")
        if bad:
            raise ConfigurationError(f"invalid experiment config keys: {', '.join(bad)}")

    def grid(self, v_max: float) -> bvft.ResolutionGrid:
        """Explicit geometric grid when bounds are set, else the V_max-anchored default."""
        if self.grid_min is None:
            return bvft.ResolutionGrid.default(v_max, self.grid_points)
        return bvft.ResolutionGrid.geometric(self.grid_min, self.grid_max, self.grid_points)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_values"] = list(self.k_values)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown experiment config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed experiment config: {exc}") from exc


@dataclass
class MetricSummary:
    method: str
    per_k: dict = field(default_factory=dict)
    n_runs: int = 0

    def rows(self) -> list[dict]:
        return [dict(method=self.method, k=k, **v, n_runs=self.n_runs) for k, v in sorted(self.per_k.items())]


def _stderr(x: np.ndarray) -> float:
    if x.size < 2:
        return 0.0
    return float(np.std(x, ddof=1) / np.sqrt(x.size))


def summarize(method: str, regrets: np.ndarray, precisions: np.ndarray, k_values) -> MetricSummary:
    """Aggregate ``(n_runs, len(k_values))`` score arrays into a summary."""
    regrets = np.asarray(regrets, dtype=np.float64).reshape(-1, len(k_values))
    precisions = np.asarray(precisions, dtype=np.float64).reshape(-1, len(k_values))
    per_k = {}
    for c, k in enumerate(k_values):
        per_k[int(k)] = {
            "mean_regret": float(regrets[:, c].mean()) if regrets.size else float("nan"),
            "stderr_regret": _stderr(regrets[:, c]),
            "mean_precision": float(precisions[:, c].mean()) if precisions.size else float("nan"),
            "stderr_precision": _stderr(precisions[:, c]),
        }
    return MetricSummary(method, per_k, int(regrets.shape[0]))


class _RowCache:
    """Per-candidate vectors over the full dataset, sliced per repetition."""

    def __init__(self, mdp, candidates, dataset, methods, q_star):
        self.greedy = [build_eval_cache(c, dataset, "greedy") for c in candidates]
        self.policy = None
        if {"bvft-pe", "bvft-pe-q"} & set(methods):
            self.policy = [build_eval_cache(c, dataset, "policy") for c in candidates]
        s, a = dataset.s, dataset.a
        self.star_qa = None
        self.dist2 = self.bell2 = None
        if {"skyline-qstar", "skyline-bellman", "bvft-skyline"} & set(methods):
            if q_star is None:
                q_star = solve_q_star(mdp)
            self.star_qa = q_star[s, a]
            v_max = mdp.v_max
            self.dist2 = np.empty((len(candidates), len(dataset)))
            self.bell2 = np.empty_like(self.dist2)
            for i, c in enumerate(candidates):
                q = np.clip(c.q, 0.0, v_max)
                self.dist2[i] = (q[s, a] - self.star_qa) ** 2
                self.bell2[i] = (q[s, a] - bellman_optimality_backup(mdp, q)[s, a]) ** 2


def _score(ranking, values, k_values):
    return [topk_regret(ranking, values, k) for k in k_values], [topk_precision(ranking, values, k) for k in k_values]


def run_experiment(
    mdp: TabularMdp,
    candidates: Sequence[CandidatePair],
    dataset: TransitionDataset,
    config: ExperimentConfig,
    q_star: Optional[np.ndarray] = None,
    records: Optional[list] = None,
    n_jobs: int = 1,
) -> list[MetricSummary]:
    """Score every configured method over repeated data and candidate subsamples.

    Each repetition draws its own generator from ``SeedSequence(config.seed)``,
    subsamples ``subsample_size`` rows, and picks ``candidates_per_run``
    candidates without replacement. ``bvft-best-res`` scores every fixed grid
    resolution and reports, per k, the one with the lowest mean regret.
    If ``records`` is a list, one dict per repetition is appended to it.
    """
    config.validate(len(candidates), len(dataset))
    values_all = np.array([c.true_value for c in candidates], dtype=np.float64)
    if not np.all(np.isfinite(values_all)):
        raise ArgumentError("every candidate needs a finite true_value")
    methods = config.methods
    cache = _RowCache(mdp, candidates, dataset, methods, q_star)
    grid = config.grid(dataset.v_max)
    k_values = config.k_values
    n_k = len(k_values)
    K = len(grid)

    scores = {m: ([], []) for m in methods if m != "bvft-best-res"}
    res_scores = ([], [])
    want_res = "bvft-best-res" in methods
    rep_seeds = np.random.SeedSequence(config.seed).spawn(config.n_repetitions)
    completed = 0
    degenerate = 0

    for rep, ss in enumerate(rep_seeds):
        rng = np.random.default_rng(ss)
        rows = subsample_rows(len(dataset), config.subsample_size, rng)
        chosen = np.sort(rng.choice(len(candidates), size=config.candidates_per_run, replace=False))
        random_seed = int(rng.integers(2**63 - 1))
        values = values_all[chosen]
        try:
            sub = dataset.take(rows)
            evals = [cache.greedy[i].take(rows) for i in chosen]
            rankings = {}
            table = None
            if "bvft" in methods or want_res:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", bvft.DegenerateResolutionWarning)
                    res, table = bvft.bvft_rank(evals, sub, grid, n_jobs=n_jobs, degenerate=config.degenerate)
                degenerate += len(caught)
                rankings["bvft"] = res.ranking
            if "bvft-pe" in methods or "bvft-pe-q" in methods:
                pe_evals = [cache.policy[i].take(rows) for i in chosen]
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", bvft.DegenerateResolutionWarning)
                    pe = bvft.bvft_pe_rank(pe_evals, sub, grid, n_jobs=n_jobs, degenerate=config.degenerate)
                rankings["bvft-pe"] = pe.ranking
                lam = 1.0 / sub.v_max if config.lam is None else config.lam
                means = np.array([bvft.avg_q(e) for e in pe_evals])
                rankings["bvft-pe-q"] = bvft._rank(pe.final_loss - lam * means)
            if "br1" in methods:
                rankings["br1"] = bvft.br1_rank(evals, sub).ranking
            if "avgq" in methods:
                rankings["avgq"] = bvft.avgq_rank(evals).ranking
            if "random" in methods:
                rankings["random"] = bvft.random_rank(len(chosen), random_seed).ranking
            if "skyline-qstar" in methods:
                rankings["skyline-qstar"] = bvft._rank(np.sqrt(cache.dist2[chosen][:, rows].mean(axis=1)))
            if "skyline-bellman" in methods:
                rankings["skyline-bellman"] = bvft._rank(np.sqrt(cache.bell2[chosen][:, rows].mean(axis=1)))
            if "bvft-skyline" in methods:
                sky = bvft._loss_table(
                    evals,
                    sub,
                    grid.resolutions,
                    sub.gamma,
                    partition_qa=cache.star_qa[rows],
                    degenerate=config.degenerate,
                )
                rankings["bvft-skyline"] = bvft._rank(sky.final)
            per_res = None
            if want_res:
                per_res = [_score(r.ranking, values, k_values) for r in bvft.fixed_resolution_rankings(table)]
        except Exception as exc:  # a failed repetition is dropped, not fatal
            log.warning("repetition %d aborted: %s", rep, exc)
            continue

        completed += 1
        for m, ranking in rankings.items():
            if m in scores:
                reg, prec = _score(ranking, values, k_values)
                scores[m][0].append(reg)
                scores[m][1].append(prec)
        if per_res is not None:
            res_scores[0].append([p[0] for p in per_res])
            res_scores[1].append([p[1] for p in per_res])
        if records is not None:
            records.append(
                {
                    "repetition": rep,
                    "candidates": chosen.tolist(),
                    "true_values": values.tolist(),
                    "rankings": {m: np.asarray(r).tolist() for m, r in rankings.items()},
                    "chosen_resolution": None if table is None else table.chosen_resolution.tolist(),
                }
            )

    if degenerate:
        log.info("all-in-one-group resolution minimised a loss in %d repetitions", degenerate)

    out = []
    for m in methods:
        if m == "bvft-best-res":
            out.append(_best_resolution_summary(res_scores, k_values, grid, K, n_k))
        else:
            out.append(summarize(m, np.array(scores[m][0]).reshape(-1, n_k), np.array(scores[m][1]).reshape(-1, n_k), k_values))
    return out


def _best_resolution_summary(res_scores, k_values, grid, K, n_k) -> MetricSummary:
    regrets = np.array(res_scores[0], dtype=np.float64).reshape(-1, K, n_k)
    precisions = np.array(res_scores[1], dtype=np.float64).reshape(-1, K, n_k)
    if regrets.shape[0] == 0:
        return summarize("bvft-best-res", np.zeros((0, n_k)), np.zeros((0, n_k)), k_values)
    best = np.argmin(regrets.mean(axis=0), axis=0)  # per k, first minimiser
    cols = np.arange(n_k)
    summary = summarize("bvft-best-res", regrets[:, best, cols], precisions[:, best, cols], k_values)
    for c, k in enumerate(k_values):
        summary.per_k[int(k)]["resolution"] = float(grid.resolutions[best[c]])
    return summary
