"""Batched per-particle kernels for the nonparametric model.

Every kernel exists twice: a vectorized numpy version and a numba ``@njit``
loop version with identical semantics. The active backend is chosen at import
time; set ``MDVPA_DISABLE_NUMBA=1`` to force the numpy path. Both backends stay
importable as ``numpy_backend`` and ``numba_backend`` (the latter is ``None``
when numba is missing) so they can be cross-checked.

Array conventions (K particles, capacity C, vocabulary V):
    prev        (K,)      int64, -1 when no previous state is counted
    n_states    (K,)      int64
    trans       (K, C, C) int32
    trans_row   (K, C)    int32
    trans_col   (K, C)    int32
    trans_total (K,)      int64
    emis        (K, C, V) int32
    emis_row    (K, C)    int32
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

NEG_INF = -np.inf


# ---------------------------------------------------------------- numpy path


def _np_transition_logprobs(prev, n_states, trans, trans_row, trans_col, trans_total,
                            alpha, gamma):
    K, C, _ = trans.shape
    ar = np.arange(K)
    has_prev = prev >= 0
    safe_prev = np.where(has_prev, prev, 0)
    col = trans_col.astype(np.float64)
    denom_top = trans_total.astype(np.float64) + gamma
    row = np.where(has_prev[:, None], trans[ar, safe_prev, :], 0).astype(np.float64)
    r = np.where(has_prev, trans_row[ar, safe_prev], 0).astype(np.float64)
    # global level only when there is no previous state
    local_scale = np.where(has_prev, alpha, 1.0)
    local_norm = np.where(has_prev, r + alpha, 1.0)
    p = (row + local_scale[:, None] * col / denom_top[:, None]) / local_norm[:, None]
    p_new = local_scale * gamma / (local_norm * denom_top)
    valid = np.arange(C)[None, :] < n_states[:, None]
    with np.errstate(divide="ignore"):
        logp = np.where(valid & (p > 0), np.log(np.where(p > 0, p, 1.0)), NEG_INF)
        log_new = np.log(p_new)
    return logp, log_new


def _np_emission_logprobs(emis, emis_row, y, beta):
    V = emis.shape[2]
    num = emis[:, :, y].astype(np.float64) + beta
    den = emis_row.astype(np.float64) + V * beta
    return np.log(num / den)


def _np_current_log_potential(prev, states, is_new, n_states, trans, trans_row,
                              trans_col, trans_total, emis, emis_row, last_symbol, y,
                              alpha, gamma, beta):
    # Undo the increments of the last step so the potential is evaluated with
    # the statistics the step itself was conditioned on.
    K, C, V = emis.shape
    ar = np.arange(K)
    has_prev = prev >= 0
    safe_prev = np.where(has_prev, prev, 0)
    t_pre = np.where(has_prev, trans[ar, safe_prev, states] - 1, 0).astype(np.float64)
    r_pre = np.where(has_prev, trans_row[ar, safe_prev] - 1, 0).astype(np.float64)
    s_pre = (trans_col[ar, states] - has_prev).astype(np.float64)
    tot_pre = (trans_total - has_prev).astype(np.float64)
    local_scale = np.where(has_prev, alpha, 1.0)
    local_norm = np.where(has_prev, r_pre + alpha, 1.0)
    p_old = (t_pre + local_scale * s_pre / (tot_pre + gamma)) / local_norm
    p_new = local_scale * gamma / (local_norm * (tot_pre + gamma))
    p_trans = np.where(is_new, p_new, p_old)
    e_pre = emis[ar, states, y].astype(np.float64) - (y == last_symbol)
    row_pre = emis_row[ar, states].astype(np.float64) - 1.0
    p_emis = (e_pre + beta) / (row_pre + V * beta)
    p = p_trans * p_emis
    with np.errstate(divide="ignore"):
        return np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), NEG_INF)


def _np_materialize(idx, child_states, child_new, prev, n_states, trans, trans_row,
                    trans_col, trans_total, emis, emis_row, y):
    t = trans[idx]
    tr = trans_row[idx]
    tc = trans_col[idx]
    tt = trans_total[idx].copy()
    e = emis[idx]
    er = emis_row[idx]
    ns = n_states[idx] + child_new
    p = prev[idx]
    ar = np.arange(len(idx))
    counted = p >= 0
    sel = ar[counted]
    t[sel, p[counted], child_states[counted]] += 1
    tr[sel, p[counted]] += 1
    tc[sel, child_states[counted]] += 1
    tt[counted] += 1
    e[ar, child_states, y] += 1
    er[ar, child_states] += 1
    return ns, t, tr, tc, tt, e, er


numpy_backend = SimpleNamespace(
    name="numpy",
    transition_logprobs=_np_transition_logprobs,
    emission_logprobs=_np_emission_logprobs,
    current_log_potential=_np_current_log_potential,
    materialize=_np_materialize,
)


# ---------------------------------------------------------------- numba path


def _build_numba_backend():
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        return None

    @njit(cache=True)
    def transition_logprobs(prev, n_states, trans, trans_row, trans_col, trans_total,
                            alpha, gamma):
        K, C, _ = trans.shape
        logp = np.full((K, C), -np.inf)
        log_new = np.empty(K)
        for k in range(K):
            denom_top = trans_total[k] + gamma
            j = prev[k]
            if j >= 0:
                norm = trans_row[k, j] + alpha
                for c in range(n_states[k]):
                    p = (trans[k, j, c] + alpha * trans_col[k, c] / denom_top) / norm
                    if p > 0:
                        logp[k, c] = np.log(p)
                log_new[k] = np.log(alpha * gamma / (norm * denom_top))
            else:
                for c in range(n_states[k]):
                    p = (0.0 + 1.0 * trans_col[k, c] / denom_top) / 1.0
                    if p > 0:
                        logp[k, c] = np.log(p)
                log_new[k] = np.log(1.0 * gamma / (1.0 * denom_top))
        return logp, log_new

    @njit(cache=True)
    def emission_logprobs(emis, emis_row, y, beta):
        K, C, V = emis.shape
        out = np.empty((K, C))
        for k in range(K):
            for c in range(C):
                out[k, c] = np.log((emis[k, c, y] + beta) / (emis_row[k, c] + V * beta))
        return out

    @njit(cache=True)
    def current_log_potential(prev, states, is_new, n_states, trans, trans_row,
                              trans_col, trans_total, emis, emis_row, last_symbol, y,
                              alpha, gamma, beta):
        K, C, V = emis.shape
        out = np.empty(K)
        for k in range(K):
            s = states[k]
            j = prev[k]
            if j >= 0:
                t_pre = trans[k, j, s] - 1.0
                r_pre = trans_row[k, j] - 1.0
                s_pre = trans_col[k, s] - 1.0
                tot_pre = trans_total[k] - 1.0
                scale = alpha
                norm = r_pre + alpha
            else:
                t_pre = 0.0
                s_pre = trans_col[k, s] * 1.0
                tot_pre = trans_total[k] * 1.0
                scale = 1.0
                norm = 1.0
            if is_new[k]:
                p_trans = scale * gamma / (norm * (tot_pre + gamma))
            else:
                p_trans = (t_pre + scale * s_pre / (tot_pre + gamma)) / norm
            e_pre = emis[k, s, y] - (1.0 if y == last_symbol else 0.0)
            row_pre = emis_row[k, s] - 1.0
            p = p_trans * ((e_pre + beta) / (row_pre + V * beta))
            out[k] = np.log(p) if p > 0 else -np.inf
        return out

    @njit(cache=True)
    def _gather_rows(src, idx):
        # flat per-row copies; 2-D slice assignment is much slower in numba
        K = src.shape[0]
        width = src.size // K if K else 0
        flat = src.reshape(K, width)
        out = np.empty((idx.shape[0], width), dtype=src.dtype)
        for i in range(idx.shape[0]):
            k = idx[i]
            for j in range(width):
                out[i, j] = flat[k, j]
        return out

    @njit(cache=True)
    def materialize(idx, child_states, child_new, prev, n_states, trans, trans_row,
                    trans_col, trans_total, emis, emis_row, y):
        N = idx.shape[0]
        K, C, V = emis.shape
        t = _gather_rows(trans, idx).reshape(N, C, C)
        tr = _gather_rows(trans_row, idx)
        tc = _gather_rows(trans_col, idx)
        e = _gather_rows(emis, idx).reshape(N, C, V)
        er = _gather_rows(emis_row, idx)
        ns = np.empty(N, dtype=n_states.dtype)
        tt = np.empty(N, dtype=trans_total.dtype)
        for i in range(N):
            k = idx[i]
            tt[i] = trans_total[k]
            ns[i] = n_states[k] + (1 if child_new[i] else 0)
            s = child_states[i]
            j = prev[k]
            if j >= 0:
                t[i, j, s] += 1
                tr[i, j] += 1
                tc[i, s] += 1
                tt[i] += 1
            e[i, s, y] += 1
            er[i, s] += 1
        return ns, t, tr, tc, tt, e, er

    return SimpleNamespace(
        name="numba",
        transition_logprobs=transition_logprobs,
        emission_logprobs=emission_logprobs,
        current_log_potential=current_log_potential,
        materialize=materialize,
    )


numba_backend = _build_numba_backend()

NUMBA_DISABLED = os.environ.get("MDVPA_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

active = numpy_backend if (NUMBA_DISABLED or numba_backend is None) else numba_backend


# ---------------------------------------------------------------- hashing

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    z = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def cell_keys(tag: int, rows, cols) -> np.ndarray:
    """Pseudo-random 64-bit key per (tag, row, col); independent of capacity."""
    rows = np.asarray(rows, dtype=np.int64) + 1
    cols = np.asarray(cols, dtype=np.int64) + 1
    raw = (
        (np.uint64(tag) << np.uint64(56))
        ^ (rows.astype(np.uint64) << np.uint64(28))
        ^ cols.astype(np.uint64)
    )
    return _splitmix64(raw)


_TABLE_CACHE: dict = {}


def _tables(C: int, V: int):
    key = (C, V)
    if key not in _TABLE_CACHE:
        i, j = np.meshgrid(np.arange(C), np.arange(C), indexing="ij")
        zt = cell_keys(1, i, j)
        i, v = np.meshgrid(np.arange(C), np.arange(V), indexing="ij")
        ze = cell_keys(2, i, v)
        _TABLE_CACHE[key] = (zt, ze)
    return _TABLE_CACHE[key]


def state_key(states) -> np.ndarray:
    return cell_keys(3, states, 0)


def nstates_key(n_states) -> np.ndarray:
    return cell_keys(4, n_states, 0)


def content_hash(states, n_states, trans, emis) -> np.ndarray:
    """Additive (mod 2**64) hash of each particle's state and counts.

    Additivity lets the hash of a one-step extension be derived from the
    parent's hash without materializing the child's counts.
    """
    K, C, V = emis.shape
    zt, ze = _tables(C, V)
    h = (trans.astype(np.uint64) * zt[None]).reshape(K, -1).sum(axis=1, dtype=np.uint64)
    h = h + (emis.astype(np.uint64) * ze[None]).reshape(K, -1).sum(axis=1, dtype=np.uint64)
    return h + state_key(states) + nstates_key(n_states)
