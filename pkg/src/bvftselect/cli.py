"""Command-line front end.

Subcommands: gen-env, gen-data, train, rank, experiment. Exit status is 0 on
success, 1 on a runtime failure and 2 on a usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, bvft, io
from .candidates import TAXI_INITIAL_VALUE, CandidateSpec, build_eval_cache, train_q_learning
from .envs import BehaviorSpec, TaxiSpec, build_taxi, generate_dataset
from .exceptions import ArgumentError, BvftError, ConfigurationError, DataError
from .mdp import evaluate_policy_exact, greedy_policy, solve_q_star
from .metrics import ExperimentConfig, run_experiment

log = logging.getLogger("bvftselect")

RANK_METHODS = (
    "bvft",
    "bvft-pe",
    "bvft-pe-q",
    "br1",
    "avgq",
    "random",
    "skyline",
    "skyline-qstar",
    "skyline-bellman",
    "bvft-skyline",
)
ORACLE_METHODS = ("skyline", "skyline-qstar", "skyline-bellman", "bvft-skyline")


class UsageError(Exception):
    """Bad flags or config; maps to exit status 2."""


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    version: str = __version__
    wall_time: Optional[float] = None

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "config": self.config,
            "inputs": [str(p) for p in self.inputs],
            "outputs": [str(p) for p in self.outputs],
            "version": self.version,
            "wall_time": self.wall_time,
        }

    def write(self, path) -> None:
        io.dump_json(self.to_dict(), path)


def _default_seed(value: Optional[int]) -> int:
    if value is not None:
        return value
    env = os.environ.get("BVFT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"BVFT_SEED must be an integer, got {env!r}")


def _finish(args, command: str, config: dict, inputs, outputs, manifest_path, started: float) -> None:
    manifest = RunManifest(command, config, list(inputs), list(outputs))
    if args.record_time:
        manifest.wall_time = round(time.perf_counter() - started, 6)
    manifest.write(manifest_path)


def _manifest_for(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


# --------------------------------------------------------------------------
# gen-env


def cmd_gen_env(args) -> int:
    started = time.perf_counter()
    variant = {"taxi": "classic", "taxi-stochastic": "stochastic"}.get(args.variant)
    if variant is None:
        raise UsageError(f"unknown variant {args.variant!r}; choose taxi or taxi-stochastic")
    spec = TaxiSpec(variant=variant, p_rand=args.p_rand, gamma=args.gamma, spawn_prob=args.spawn_prob)
    try:
        spec.validate()
    except BvftError as exc:
        raise UsageError(str(exc))
    mdp = build_taxi(spec)
    io.write_mdp(mdp, args.out, extra={"env_id": spec.env_id, "taxi_spec": spec.__dict__})
    print(f"states={mdp.n_states} actions={mdp.n_actions} gamma={mdp.gamma:g} v_max={mdp.v_max:g}")
    config = {"variant": args.variant, "p_rand": args.p_rand, "gamma": args.gamma, "spawn_prob": args.spawn_prob}
    _finish(args, "gen-env", config, [], [args.out], _manifest_for(args.out), started)
    return 0


# --------------------------------------------------------------------------
# gen-data


def _env_id(path) -> str:
    meta = io.load_json(path).get("meta") or {}
    return meta.get("env_id", Path(path).stem)


def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    if args.n <= 0:
        raise UsageError("--n must be positive")
    if not 0.0 <= args.epsilon <= 1.0:
        raise UsageError("--epsilon must lie in [0, 1]")
    seed = _default_seed(args.seed)
    mdp = io.read_mdp(args.env)
    expert = greedy_policy(solve_q_star(mdp))
    behavior = BehaviorSpec(
        expert,
        epsilon=args.epsilon,
        mode=args.mode,
        horizon_cap=args.horizon_cap,
        expert_fraction=args.expert_fraction,
    )
    data = generate_dataset(mdp, behavior, args.n, seed, env_id=_env_id(args.env))
    io.write_dataset(data, args.out)
    cov = data.coverage()
    print(
        f"rows={cov['rows']} states={cov['distinct_states']}/{cov['n_states']} "
        f"state_actions={cov['distinct_state_actions']} terminal_rows={cov['terminal_rows']} "
        f"behavior={data.meta['behavior']}"
    )
    config = {
        "env": str(args.env),
        "n": args.n,
        "epsilon": args.epsilon,
        "mode": args.mode,
        "expert_fraction": args.expert_fraction,
        "horizon_cap": args.horizon_cap,
        "seed": seed,
    }
    _finish(args, "gen-data", config, [args.env], [args.out], _manifest_for(args.out), started)
    return 0


# --------------------------------------------------------------------------
# train


def _grid_specs(doc) -> list[CandidateSpec]:
    try:
        if isinstance(doc, list):
            return [CandidateSpec(**d) for d in doc]
        if "specs" in doc:
            return [CandidateSpec(**d) for d in doc["specs"]]
        lrs = doc.get("learning_rates", [])
        steps = doc.get("learning_steps", [])
        seeds = doc.get("seeds", [0])
        common = {k: doc[k] for k in ("exploration_eps", "horizon_cap") if k in doc}
        common["initial_value"] = float(doc.get("initial_value", TAXI_INITIAL_VALUE))
        return [
            CandidateSpec(float(lr), int(st), seed=int(sd), **common)
            for sd in seeds
            for lr in lrs
            for st in steps
        ]
    except (TypeError, ValueError) as exc:
        raise UsageError(f"malformed grid: {exc}")


def _file_name(label: str) -> str:
    keep = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label)
    return f"{keep}.json"


def cmd_train(args) -> int:
    started = time.perf_counter()
    specs = _grid_specs(io.load_json(args.grid))
    if not specs:
        raise UsageError("grid has no candidate specs")
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise UsageError("grid produces duplicate candidate labels")
    mdp = io.read_mdp(args.env)
    out_dir = io.ensure_dir(args.out_dir)
    entries, outputs, failed = [], [], []
    for spec in specs:
        try:
            pair = train_q_learning(mdp, spec)
            pair.true_value = evaluate_policy_exact(mdp, pair.policy)
        except Exception as exc:
            log.error("training %s failed: %s", spec.label, exc)
            failed.append(spec.label)
            continue
        name = _file_name(spec.label)
        io.write_candidate(pair, out_dir / name)
        outputs.append(out_dir / name)
        entries.append({"label": spec.label, "file": name, "true_value": pair.true_value})
    index = out_dir / "index.json"
    io.write_candidate_index(entries, index)
    outputs.append(index)
    print(f"trained={len(entries)} failed={len(failed)} index={index}")
    config = {"env": str(args.env), "specs": [s.to_dict() for s in specs]}
    _finish(args, "train", config, [args.env, args.grid], outputs, out_dir / "manifest.json", started)
    return 1 if failed else 0


# --------------------------------------------------------------------------
# rank


def _load_candidates(path):
    p = Path(path)
    if p.is_dir():
        p = p / "index.json"
    doc = io.load_json(p)
    if isinstance(doc, dict) and "candidates" in doc:
        return io.read_candidate_index(p)
    return [io.candidate_from_dict(doc)]


def _grid_from_args(args, v_max: float) -> bvft.ResolutionGrid:
    if (args.grid_min is None) != (args.grid_max is None):
        raise UsageError("--grid-min and --grid-max go together")
    try:
        if args.grid_min is None:
            return bvft.ResolutionGrid.default(v_max, args.grid_points)
        return bvft.ResolutionGrid.geometric(args.grid_min, args.grid_max, args.grid_points)
    except (ArgumentError, ValueError) as exc:
        raise UsageError(f"bad grid: {exc}")


def cmd_rank(args) -> int:
    started = time.perf_counter()
    if args.method not in RANK_METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {', '.join(RANK_METHODS)}")
    if args.method in ORACLE_METHODS and not args.env:
        raise UsageError("oracle environment required (--env) for skyline methods")
    if args.grid_points < 1:
        raise UsageError("--grid-points must be >= 1")
    if args.lam is not None and args.lam < 0:
        raise UsageError("--lambda must be >= 0")
    seed = _default_seed(args.seed)
    data = io.read_dataset(args.dataset)
    pairs = _load_candidates(args.candidates)
    if not pairs:
        raise UsageError("no candidates to rank")
    grid = _grid_from_args(args, data.v_max)
    n_jobs = max(1, args.threads)
    labels = [p.label for p in pairs]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", bvft.DegenerateResolutionWarning)
        m = args.method
        if m == "bvft":
            evals = [build_eval_cache(p, data, "greedy") for p in pairs]
            result = bvft.bvft_rank(evals, data, grid, n_jobs=n_jobs, degenerate=args.degenerate)[0]
        elif m in ("bvft-pe", "bvft-pe-q"):
            evals = [build_eval_cache(p, data, "policy") for p in pairs]
            if m == "bvft-pe":
                result = bvft.bvft_pe_rank(evals, data, grid, n_jobs=n_jobs, degenerate=args.degenerate)
            else:
                result = bvft.bvft_pe_q_rank(
                    evals, data, grid, lam=args.lam, n_jobs=n_jobs, degenerate=args.degenerate
                )
        elif m == "br1":
            result = bvft.br1_rank([build_eval_cache(p, data, "greedy") for p in pairs], data)
        elif m == "avgq":
            result = bvft.avgq_rank([build_eval_cache(p, data, "greedy") for p in pairs])
        elif m == "random":
            result = bvft.random_rank(len(pairs), seed)
        else:
            mdp = io.read_mdp(args.env)
            if (mdp.n_states, mdp.n_actions) != pairs[0].q.shape:
                raise DataError("candidate tables do not match the oracle environment")
            sky = bvft.skyline_losses(mdp, pairs, data, grid, degenerate=args.degenerate)
            key = {"skyline": "qstar-distance", "skyline-qstar": "qstar-distance"}.get(m, m)
            result = sky["bellman-error" if key == "skyline-bellman" else key]
    result.labels = labels
    result.diagnostics = dict(result.diagnostics, warnings=[str(w.message) for w in caught])
    io.write_selection(result, args.out)
    top = result.ranking[0]
    print(f"method={result.method} candidates={len(pairs)} top={labels[top]}")
    config = {
        "method": args.method,
        "dataset": str(args.dataset),
        "candidates": str(args.candidates),
        "env": None if args.env is None else str(args.env),
        "grid": list(grid.resolutions),
        "lambda": args.lam,
        "seed": seed,
        "degenerate": args.degenerate,
    }
    inputs = [args.dataset, args.candidates] + ([args.env] if args.env else [])
    _finish(args, "rank", config, inputs, [args.out], _manifest_for(args.out), started)
    return 0


# --------------------------------------------------------------------------
# experiment

_ARTIFACT_KEYS = ("env", "dataset", "candidates")


def _experiment_config(path) -> tuple[ExperimentConfig, dict]:
    doc = io.load_json(path)
    if not isinstance(doc, dict):
        raise UsageError("experiment config must be a JSON object")
    missing = [k for k in _ARTIFACT_KEYS if k not in doc]
    if missing:
        raise UsageError(f"experiment config is missing keys: {', '.join(missing)}")
    base = Path(path).parent
    paths = {k: base / doc[k] for k in _ARTIFACT_KEYS}
    fields = {k: v for k, v in doc.items() if k not in _ARTIFACT_KEYS}
    if "seed" not in fields:
        fields["seed"] = _default_seed(None)
    try:
        cfg = ExperimentConfig.from_dict(fields)
        cfg.validate()
    except ConfigurationError as exc:
        raise UsageError(str(exc))
    return cfg, paths


def cmd_experiment(args) -> int:
    started = time.perf_counter()
    cfg, paths = _experiment_config(args.config)
    mdp = io.read_mdp(paths["env"])
    data = io.read_dataset(paths["dataset"])
    pairs = _load_candidates(paths["candidates"])
    try:
        cfg.validate(len(pairs), len(data))
    except ConfigurationError as exc:
        raise UsageError(str(exc))
    for p in pairs:
        if p.true_value is None:
            p.true_value = evaluate_policy_exact(mdp, p.policy)
    summaries = run_experiment(mdp, pairs, data, cfg, n_jobs=max(1, args.threads))
    out_dir = io.ensure_dir(args.out_dir)
    csv_path = out_dir / "summary.csv"
    io.write_summary_csv(summaries, csv_path)
    sidecar = out_dir / "summary.json"
    extras = {
        s.method: {str(k): v for k, v in s.per_k.items()} for s in summaries if s.method == "bvft-best-res"
    }
    io.dump_json(
        {
            "config": cfg.to_dict(),
            "inputs": {k: str(v) for k, v in paths.items()},
            "n_candidates": len(pairs),
            "dataset_size": len(data),
            "details": extras,
        },
        sidecar,
    )
    for s in summaries:
        v = s.per_k[min(s.per_k)]
        print(f"{s.method:16s} k={min(s.per_k)} regret={v['mean_regret']:.4f}+-{v['stderr_regret']:.4f} runs={s.n_runs}")
    config = dict(cfg.to_dict(), **{k: str(v) for k, v in paths.items()})
    _finish(
        args,
        "experiment",
        config,
        [args.config, *paths.values()],
        [csv_path, sidecar],
        out_dir / "manifest.json",
        started,
    )
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bvftselect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
    parser.add_argument("--record-time", action="store_true", help="store wall time in the run manifest")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-env", help="write a Taxi MDP file")
    p.add_argument("--variant", required=True, help="taxi or taxi-stochastic")
    p.add_argument("--p-rand", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=0.95)
    p.add_argument("--spawn-prob", type=float, default=0.3, help="per-step passenger flip rate (stochastic)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("gen-data", help="roll out an offline dataset")
    p.add_argument("--env", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--mode", choices=("per-step", "trajectory-mix"), default="per-step")
    p.add_argument("--expert-fraction", type=float, default=0.7, help="expert share of trajectories (trajectory-mix)")
    p.add_argument("--horizon-cap", type=int, default=200)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train Q-learning candidates from a spec grid")
    p.add_argument("--env", required=True)
    p.add_argument("--grid", required=True, help="JSON spec grid")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank", help="rank candidates with one selection method")
    p.add_argument("--method", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--candidates", required=True, help="index.json, its directory, or one candidate file")
    p.add_argument("--env", help="oracle MDP (skyline methods only)")
    p.add_argument("--grid-min", type=float)
    p.add_argument("--grid-max", type=float)
    p.add_argument("--grid-points", type=int, default=10)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--degenerate", choices=bvft.DEGENERATE_MODES, default="exclude")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("experiment", help="repeated-subsampling evaluation of selection methods")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, ArgumentError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (BvftError, OSError, ValueError) as exc:
        print(f"{parser.prog} {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
