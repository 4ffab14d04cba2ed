"""Compiled inner loops.

Randomness never originates here: callers pre-draw uniforms from a seeded
``numpy.random.Generator`` and pass them in, so results depend only on the
caller's seed.
"""
from __future__ import annotations

import numpy as np
from numba import njit


def row_cumulative(flat) -> np.ndarray:
    """Per-row cumulative sums of a CSR matrix's data array."""
    data = flat.data
    if data.size == 0:
        return data.copy()
    cs = np.cumsum(data)
    base = np.concatenate(([0.0], cs))[flat.indptr[:-1]]
    counts = np.diff(flat.indptr)
    return cs - np.repeat(base, counts)


@njit(cache=True)
def _sample_row(indptr, indices, cum, row, u):
    lo = indptr[row]
    hi = indptr[row + 1]
    total = cum[hi - 1]
    x = u * total
    k = lo + np.searchsorted(cum[lo:hi], x, side="right")
    if k >= hi:
        k = hi - 1
    return indices[k]


@njit(cache=True)
def _sample_cdf(cdf, u):
    k = np.searchsorted(cdf, u * cdf[-1], side="right")
    if k >= cdf.shape[0]:
        k = cdf.shape[0] - 1
    return k


@njit(cache=True)
def rollout(
    indptr,
    indices,
    cum,
    reward_flat,
    terminal,
    d0_cdf,
    cdf_expert,
    cdf_explore,
    traj_u,
    step_u,
    expert_fraction,
    per_step,
    horizon,
    n,
):
    n_actions = cdf_expert.shape[1]
    out_s = np.empty(n, np.int64)
    out_a = np.empty(n, np.int64)
    out_r = np.empty(n, np.float64)
    out_s2 = np.empty(n, np.int64)
    out_t = np.empty(n, np.bool_)
    t = 0
    k = 0
    while t < n:
        s = _sample_cdf(d0_cdf, traj_u[k, 0])
        use_expert = (not per_step) and traj_u[k, 1] < expert_fraction
        k += 1
        for _ in range(horizon):
            if use_expert:
                a = _sample_cdf(cdf_expert[s], step_u[t, 0])
            else:
                a = _sample_cdf(cdf_explore[s], step_u[t, 0])
            row = s * n_actions + a
            s2 = _sample_row(indptr, indices, cum, row, step_u[t, 1])
            out_s[t] = s
            out_a[t] = a
            out_r[t] = reward_flat[row]
            out_s2[t] = s2
            out_t[t] = terminal[s2]
            t += 1
            if t >= n or terminal[s2]:
                break
            s = s2
    return out_s, out_a, out_r, out_s2, out_t


@njit(cache=True)
def q_learning(indptr, indices, cum, reward_flat, terminal, d0_cdf, q, lr, gamma, eps, horizon, init_u, u):
    n_actions = q.shape[1]
    s = _sample_cdf(d0_cdf, init_u)
    t_ep = 0
    for step in range(u.shape[0]):
        if u[step, 0] < eps:
            a = int(u[step, 1] * n_actions)
            if a >= n_actions:
                a = n_actions - 1
        else:
            best = q[s, 0]
            n_best = 1
            for b in range(1, n_actions):
                if q[s, b] > best:
                    best = q[s, b]
                    n_best = 1
                elif q[s, b] == best:
                    n_best += 1
            # uniform tie-break keeps the zero-initialised table exploring
            pick = int(u[step, 4] * n_best)
            if pick >= n_best:
                pick = n_best - 1
            a = 0
            for b in range(n_actions):
                if q[s, b] == best:
                    if pick == 0:
                        a = b
                        break
                    pick -= 1
        row = s * n_actions + a
        s2 = _sample_row(indptr, indices, cum, row, u[step, 2])
        target = reward_flat[row]
        if not terminal[s2]:
            nxt = q[s2, 0]
            for b in range(1, n_actions):
                if q[s2, b] > nxt:
                    nxt = q[s2, b]
            target += gamma * nxt
        q[s, a] += lr * (target - q[s, a])
        t_ep += 1
        if terminal[s2] or t_ep >= horizon:
            s = _sample_cdf(d0_cdf, u[step, 3])
            t_ep = 0
        else:
            s = s2
    return q


@njit(cache=True, nogil=True)
def group_loss(keys, n_groups, qa, target, sums, counts):
    """RMS of ``qa - groupmean(target)``, the number of groups, and the singleton-row fraction.

    ``sums``/``counts`` are zeroed scratch buffers of length >= ``n_groups``;
    they are restored to zero before returning.
    """
    n = keys.shape[0]
    distinct = 0
    for t in range(n):
        g = keys[t]
        if counts[g] == 0:
            distinct += 1
        sums[g] += target[t]
        counts[g] += 1
    acc = 0.0
    singles = 0
    for t in range(n):
        g = keys[t]
        c = counts[g]
        d = qa[t] - sums[g] / c
        acc += d * d
        if c == 1:
            singles += 1
    for t in range(n):
        g = keys[t]
        sums[g] = 0.0
        counts[g] = 0
    return np.sqrt(acc / n), distinct, singles / n


@njit(cache=True, nogil=True)
def pair_table(bins, n_bins, qa, target, sums, counts, loss, groups, singles):
    """``group_loss`` for every ordered pair (i, j) at one resolution.

    Row t of pair (i, j) falls in group ``bins[i, t] * n_bins[j] + bins[j, t]``;
    scratch buffers must hold ``max(n_bins) ** 2`` entries.
    """
    m, n = bins.shape
    for i in range(m):
        for j in range(m):
            nj = n_bins[j]
            distinct = 0
            for t in range(n):
                g = bins[i, t] * nj + bins[j, t]
                if counts[g] == 0:
                    distinct += 1
                sums[g] += target[i, t]
                counts[g] += 1
            acc = 0.0
            single = 0
            for t in range(n):
                g = bins[i, t] * nj + bins[j, t]
                c = counts[g]
                d = qa[i, t] - sums[g] / c
                acc += d * d
                if c == 1:
                    single += 1
            for t in range(n):
                g = bins[i, t] * nj + bins[j, t]
                sums[g] = 0.0
                counts[g] = 0
            loss[i, j] = np.sqrt(acc / n)
            groups[i, j] = distinct
            singles[i, j] = single / n
