"""File formats: MDP, dataset, candidate, selection and summary files.

Floats go through ``repr`` in JSON (shortest string that round-trips
exactly) and ``%.17g`` in CSV, so every file reloads bit-for-bit.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .candidates import CandidatePair, CandidateSpec
from .envs import TransitionDataset
from .exceptions import DataError
from .mdp import Policy, TabularMdp

__all__ = [
    "SUMMARY_COLUMNS",
    "dump_json",
    "load_json",
    "write_mdp",
    "read_mdp",
    "mdp_to_dict",
    "mdp_from_dict",
    "write_dataset",
    "read_dataset",
    "write_candidate",
    "read_candidate",
    "write_candidate_index",
    "read_candidate_index",
    "write_selection",
    "write_summary_csv",
    "read_summary_csv",
    "file_digest",
]

SUMMARY_COLUMNS = ("method", "k", "mean_regret", "stderr_regret", "mean_precision", "stderr_precision", "n_runs")


def dump_json(obj, path, indent: Optional[int] = 1) -> None:
    text = json.dumps(obj, indent=indent, allow_nan=False)
    Path(path).write_text(text + "\n")


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc})") from exc


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# MDP


def mdp_to_dict(mdp: TabularMdp, extra: Optional[dict] = None) -> dict:
    """JSON document for an MDP; transitions as sparse ``[s', p]`` lists per (s, a)."""
    flat = mdp.flat_transition
    rows = []
    for row in range(mdp.n_states * mdp.n_actions):
        lo, hi = flat.indptr[row], flat.indptr[row + 1]
        rows.append([[int(j), float(p)] for j, p in zip(flat.indices[lo:hi], flat.data[lo:hi])])
    transition = [rows[s * mdp.n_actions : (s + 1) * mdp.n_actions] for s in range(mdp.n_states)]
    doc = {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "r_max": mdp.r_max,
        "transition_sparse": transition,
        "reward": mdp.reward.tolist(),
        "initial_dist": mdp.initial_dist.tolist(),
        "terminal_mask": [bool(x) for x in mdp.terminal_mask],
    }
    if extra:
        doc["meta"] = extra
    return doc


def mdp_from_dict(doc: dict) -> TabularMdp:
    """Inverse of ``mdp_to_dict``; also accepts a dense nested ``transition`` array."""
    try:
        S, A = int(doc["n_states"]), int(doc["n_actions"])
        if "transition_sparse" in doc:
            rows, cols, vals = [], [], []
            nested = doc["transition_sparse"]
            if len(nested) != S or any(len(x) != A for x in nested):
                raise DataError("transition_sparse has the wrong shape")
            for s, per_action in enumerate(nested):
                for a, entries in enumerate(per_action):
                    for j, p in entries:
                        rows.append(s * A + a)
                        cols.append(int(j))
                        vals.append(float(p))
            P = sp.csr_matrix((vals, (rows, cols)), shape=(S * A, S))
        else:
            P = np.asarray(doc["transition"], dtype=np.float64)
        return TabularMdp(
            P,
            np.asarray(doc["reward"], dtype=np.float64),
            float(doc["gamma"]),
            np.asarray(doc["initial_dist"], dtype=np.float64),
            np.asarray(doc.get("terminal_mask", [False] * S), dtype=bool),
            r_max=doc.get("r_max"),
        )
    except KeyError as exc:
        raise DataError(f"MDP document lacks field {exc}") from exc


def write_mdp(mdp: TabularMdp, path, extra: Optional[dict] = None) -> None:
    dump_json(mdp_to_dict(mdp, extra), path, indent=None)


def read_mdp(path) -> TabularMdp:
    return mdp_from_dict(load_json(path))


# --------------------------------------------------------------------------
# datasets: one JSON meta line, then ``s,a,r,s_next,terminal`` rows


def write_dataset(dataset: TransitionDataset, path) -> None:
    meta = dict(dataset.meta)
    meta["size"] = len(dataset)
    lines = [json.dumps(meta, sort_keys=True)]
    r_txt = [format(x, ".17g") for x in dataset.r.tolist()]
    for s, a, r, s2, t in zip(dataset.s.tolist(), dataset.a.tolist(), r_txt, dataset.s_next.tolist(), dataset.terminal.tolist()):
        lines.append(f"{s},{a},{r},{s2},{int(t)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> TransitionDataset:
    text = Path(path).read_text()
    head, _, body = text.partition("\n")
    try:
        meta = json.loads(head)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: first line is not a JSON meta object") from exc
    if not isinstance(meta, dict) or "size" not in meta:
        raise DataError(f"{path}: meta line lacks 'size'")
    body = body.strip()
    n = 0 if not body else body.count("\n") + 1
    if n != int(meta["size"]):
        raise DataError(f"{path}: meta says {meta['size']} rows, file has {n}")
    if n == 0:
        cols = np.zeros((0, 5))
    else:
        try:
            cols = np.loadtxt(_io.StringIO(body), delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise DataError(f"{path}: malformed row ({exc})") from exc
        if cols.shape[1] != 5:
            raise DataError(f"{path}: expected 5 columns, found {cols.shape[1]}")
        if not np.all(np.isin(cols[:, 4], (0.0, 1.0))):
            raise DataError(f"{path}: terminal column must be 0 or 1")
    return TransitionDataset(
        cols[:, 0].astype(np.int64),
        cols[:, 1].astype(np.int64),
        cols[:, 2],
        cols[:, 3].astype(np.int64),
        cols[:, 4].astype(bool),
        meta,
    )


# --------------------------------------------------------------------------
# candidates


def _policy_doc(policy: Policy):
    if policy.kind == "deterministic":
        return [int(x) for x in policy.table]
    return policy.table.tolist()


def candidate_to_dict(pair: CandidatePair) -> dict:
    S, A = pair.q.shape
    return {
        "label": pair.label,
        "spec": None if pair.spec is None else pair.spec.to_dict(),
        "n_states": S,
        "n_actions": A,
        "q": pair.q.ravel().tolist(),
        "policy": _policy_doc(pair.policy),
        "true_value": pair.true_value,
    }


def candidate_from_dict(doc: dict) -> CandidatePair:
    try:
        S, A = int(doc["n_states"]), int(doc["n_actions"])
        q = np.asarray(doc["q"], dtype=np.float64)
        if q.size != S * A:
            raise DataError(f"candidate {doc.get('label')!r}: q has {q.size} entries, expected {S * A}")
        pol = np.asarray(doc["policy"])
        policy = Policy.deterministic(pol) if pol.ndim == 1 else Policy.stochastic(pol)
        spec = None if doc.get("spec") is None else CandidateSpec(**doc["spec"])
        return CandidatePair(q.reshape(S, A), policy, spec, doc.get("true_value"), doc.get("label", ""))
    except KeyError as exc:
        raise DataError(f"candidate document lacks field {exc}") from exc


def write_candidate(pair: CandidatePair, path) -> None:
    dump_json(candidate_to_dict(pair), path, indent=None)


def read_candidate(path) -> CandidatePair:
    return candidate_from_dict(load_json(path))


def write_candidate_index(entries: Sequence[dict], path) -> None:
    dump_json({"candidates": list(entries)}, path)


def read_candidate_index(path) -> list[CandidatePair]:
    """Load the candidates an index file lists, resolving paths next to the index."""
    doc = load_json(path)
    base = Path(path).parent
    try:
        return [read_candidate(base / e["file"]) for e in doc["candidates"]]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed candidate index") from exc


# --------------------------------------------------------------------------
# selection results and summaries


def write_selection(result, path) -> None:
    dump_json(result.to_dict(), path)


def _cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_summary_csv(summaries: Iterable, path) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        for row in s.rows():
            w.writerow([_cell(row[c]) for c in SUMMARY_COLUMNS])
    Path(path).write_text(buf.getvalue())


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(
            {
                "method": r["method"],
                "k": int(r["k"]),
                **{c: float(r[c]) for c in SUMMARY_COLUMNS[2:6]},
                "n_runs": int(r["n_runs"]),
            }
        )
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
