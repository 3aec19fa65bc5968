"""Particle filters over the marginalized iHMM: bootstrap SMC, VPA and MD-VPA.

A ``ParticleSet`` keeps every particle's counts in batched arrays so that a
filter step is a handful of array operations (see ``_kernels``); the
``particles`` property gives per-particle value views when needed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .ihmm_core import ModelConfig, SufficientStats

GEOMETRIC_MEAN = "geometric_mean"
ARITHMETIC_SUM = "arithmetic_sum"
DENOMINATOR_VARIANTS = (GEOMETRIC_MEAN, ARITHMETIC_SUM)

_COUNT_DTYPE = np.int32


class DegenerateFilterError(RuntimeError):
    """Every particle (or candidate) ended up with zero weight."""

    def __init__(self, step: int, filter_name: str = ""):
        self.step = step
        self.filter_name = filter_name
        who = f"{filter_name} " if filter_name else ""
        super().__init__(f"{who}filter degenerated at step {step}: all weights are zero")


def epsilon_schedule(n: int, kind="reciprocal") -> float:
    """Step size for observation ``n`` (1-based).

    ``kind`` is ``"reciprocal"`` (1/n), ``"constant:<c>"`` or a bare number.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(kind, (int, float)):
        return float(kind)
    if kind == "reciprocal":
        return 1.0 / n
    if kind.startswith("constant:"):
        return float(kind.split(":", 1)[1])
    raise ValueError(f"unknown schedule {kind!r}")


def validate_schedule(kind) -> None:
    eps = [epsilon_schedule(n, kind) for n in (1, 2, 3)]
    if any(e < 0 for e in eps) or any(b > a for a, b in zip(eps, eps[1:])):
        raise ValueError(f"schedule {kind!r} must be nonnegative and non-increasing")


@dataclass(frozen=True)
class FilterConfig:
    K: int
    model: ModelConfig
    M0: int = 0
    schedule: str = "reciprocal"
    seed: int = 0
    denominator_variant: str = GEOMETRIC_MEAN

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.M0 < 0:
            raise ValueError("M0 must be >= 0")
        if self.denominator_variant not in DENOMINATOR_VARIANTS:
            raise ValueError(f"denominator_variant must be one of {DENOMINATOR_VARIANTS}")
        validate_schedule(self.schedule)


@dataclass(frozen=True)
class Particle:
    state: int
    stats: SufficientStats
    log_weight: float


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """K weighted hypotheses ``(state, counts)`` stored as batched arrays.

    ``states`` is the state reached at the last observation (before the first
    observation it holds the drawn initial label, or -1). Arrays are treated as
    immutable; every step builds new ones.
    """

    states: np.ndarray
    prev_states: np.ndarray
    is_new: np.ndarray
    n_states: np.ndarray
    trans: np.ndarray
    trans_row: np.ndarray
    trans_col: np.ndarray
    trans_total: np.ndarray
    emis: np.ndarray
    emis_row: np.ndarray
    log_weights: np.ndarray
    log_path: np.ndarray
    hashes: Optional[np.ndarray] = None
    n: int = 0
    last_symbol: int = -1
    ess: Optional[float] = field(default=None)

    def __post_init__(self):
        if self.hashes is None:
            object.__setattr__(self, "hashes", self.content_hash())

    @property
    def K(self) -> int:
        return len(self.states)

    @property
    def capacity(self) -> int:
        return self.trans.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.emis.shape[2]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def prev_for_next(self) -> np.ndarray:
        """State each particle transitions from at the next observation."""
        if self.n == 0:
            return np.full(self.K, -1, dtype=np.int64)
        return self.states

    def stats(self, k: int) -> SufficientStats:
        M = int(self.n_states[k])
        trans = self.trans[k, :M, :M].astype(np.int64)
        emis = self.emis[k, :M].astype(np.int64)
        trans.setflags(write=False)
        emis.setflags(write=False)
        return SufficientStats(M=M, trans=trans, emis=emis)

    @property
    def particles(self) -> List[Particle]:
        return [
            Particle(int(self.states[k]), self.stats(k), float(self.log_weights[k]))
            for k in range(self.K)
        ]

    def content_hash(self) -> np.ndarray:
        """Hash of each particle's state and counts, recomputed from scratch.

        ``hashes`` holds the same values, maintained incrementally.
        """
        return _kernels.content_hash(self.states, self.n_states, self.trans, self.emis)

    def equals(self, other: "ParticleSet") -> bool:
        """Same states, counts and weights (bit-for-bit)."""
        if self.K != other.K or self.n != other.n:
            return False
        if not np.array_equal(self.log_weights, other.log_weights):
            return False
        if not np.array_equal(self.states, other.states):
            return False
        return all(self.stats(k) == other.stats(k) for k in range(self.K))


def _empty_set(K: int, C: int, V: int, n_states: int, states: np.ndarray) -> ParticleSet:
    return ParticleSet(
        states=states.astype(np.int64),
        prev_states=np.full(K, -1, dtype=np.int64),
        is_new=np.zeros(K, dtype=bool),
        n_states=np.full(K, n_states, dtype=np.int64),
        trans=np.zeros((K, C, C), dtype=_COUNT_DTYPE),
        trans_row=np.zeros((K, C), dtype=_COUNT_DTYPE),
        trans_col=np.zeros((K, C), dtype=_COUNT_DTYPE),
        trans_total=np.zeros(K, dtype=np.int64),
        emis=np.zeros((K, C, V), dtype=_COUNT_DTYPE),
        emis_row=np.zeros((K, C), dtype=_COUNT_DTYPE),
        log_weights=np.full(K, -math.log(K)),
        log_path=np.zeros(K),
    )


def init_particles(cfg: FilterConfig, rng: np.random.Generator) -> ParticleSet:
    """K equally weighted particles with empty counts.

    In nonparametric mode each particle starts in a label drawn uniformly from
    the ``M0`` pre-instantiated states (-1 when ``M0 == 0``). In fixed mode the
    state space is the known HMM's and the first state follows its initial
    distribution, so no label is drawn.
    """
    model = cfg.model
    V = model.vocab_size
    if model.fixed is not None:
        S = model.fixed.num_states
        return _empty_set(cfg.K, S, V, S, np.full(cfg.K, -1))
    if cfg.M0 > 0:
        states = rng.integers(0, cfg.M0, size=cfg.K)
    else:
        states = np.full(cfg.K, -1)
    return _empty_set(cfg.K, max(cfg.M0 + 1, 8), V, cfg.M0, states)


def _ensure_capacity(ps: ParticleSet, model: ModelConfig) -> ParticleSet:
    if model.fixed is not None:
        return ps
    needed = int(ps.n_states.max()) + 1
    C = ps.capacity
    if needed <= C:
        return ps
    new_C = max(needed, C + max(8, C // 4))
    pad2 = ((0, 0), (0, new_C - C))
    return replace(
        ps,
        trans=np.pad(ps.trans, ((0, 0), (0, new_C - C), (0, new_C - C))),
        trans_row=np.pad(ps.trans_row, pad2),
        trans_col=np.pad(ps.trans_col, pad2),
        emis=np.pad(ps.emis, ((0, 0), (0, new_C - C), (0, 0))),
        emis_row=np.pad(ps.emis_row, pad2),
    )


# ------------------------------------------------------------------ potentials


def log_transition(ps: ParticleSet, model: ModelConfig):
    """Log transition predictive from each particle's current state.

    Returns ``(existing, new)`` with shapes ``(K, C)`` and ``(K,)``; entries for
    labels a particle does not have are ``-inf``.
    """
    prev = ps.prev_for_next
    if model.fixed is not None:
        spec = model.fixed
        with np.errstate(divide="ignore"):
            log_init = np.log(spec.initial)
            log_t = np.log(spec.transition)
        rows = np.where(prev[:, None] >= 0, log_t[np.maximum(prev, 0)], log_init[None, :])
        return rows, np.full(ps.K, -np.inf)
    return _kernels.active.transition_logprobs(
        prev, ps.n_states, ps.trans, ps.trans_row, ps.trans_col, ps.trans_total,
        float(model.alpha), float(model.gamma),
    )


def log_emission(ps: ParticleSet, model: ModelConfig, y: int):
    """Log emission predictive of ``y`` for every label, plus the new-state value."""
    if not 0 <= y < model.vocab_size:
        raise ValueError(f"symbol {y} outside 0..{model.vocab_size - 1}")
    if model.fixed is not None:
        with np.errstate(divide="ignore"):
            col = np.log(model.fixed.emission[:, y])
        return np.broadcast_to(col, (ps.K, len(col))), -np.inf
    le = _kernels.active.emission_logprobs(ps.emis, ps.emis_row, int(y),
                                           float(model.emission_beta))
    return le, -math.log(model.vocab_size)


def log_potential_grid(ps: ParticleSet, model: ModelConfig, y: int) -> np.ndarray:
    """``log f(x^k: m, y)`` as a ``(K, C + 1)`` array; column ``C`` is the new state."""
    lt, lt_new = log_transition(ps, model)
    le, le_new = log_emission(ps, model, y)
    out = np.empty((ps.K, lt.shape[1] + 1))
    out[:, :-1] = lt + le
    out[:, -1] = lt_new + le_new
    return out


def current_log_potential(ps: ParticleSet, model: ModelConfig, y: int) -> np.ndarray:
    """``log f(x_n^k, y)`` for each particle's current state.

    Evaluated with the counts and previous state the last step conditioned on,
    with ``y`` substituted for the observation that step absorbed.
    """
    if ps.n == 0:
        raise ValueError("particle set has not absorbed any observation yet")
    if not 0 <= y < model.vocab_size:
        raise ValueError(f"symbol {y} outside 0..{model.vocab_size - 1}")
    if model.fixed is not None:
        spec = model.fixed
        trans = np.where(
            ps.prev_states >= 0,
            spec.transition[np.maximum(ps.prev_states, 0), ps.states],
            spec.initial[ps.states],
        )
        p = trans * spec.emission[ps.states, y]
        with np.errstate(divide="ignore"):
            return np.log(p)
    return _kernels.active.current_log_potential(
        ps.prev_states, ps.states, ps.is_new, ps.n_states, ps.trans, ps.trans_row,
        ps.trans_col, ps.trans_total, ps.emis, ps.emis_row, int(ps.last_symbol),
        int(y), float(model.alpha), float(model.gamma), float(model.emission_beta),
    )


def _extension_hash(ps: ParticleSet, idx, child_states, child_new, y) -> np.ndarray:
    """Hash of parent ``idx`` extended by ``child_states`` emitting ``y``."""
    prev = ps.prev_for_next[idx]
    zt, ze = _kernels._tables(ps.capacity, ps.vocab_size)
    return (
        ps.hashes[idx]
        + _kernels.state_key(child_states) - _kernels.state_key(ps.states[idx])
        + _kernels.nstates_key(ps.n_states[idx] + child_new)
        - _kernels.nstates_key(ps.n_states[idx])
        + ze[child_states, y]
        + np.where(prev >= 0, zt[np.maximum(prev, 0), child_states], np.uint64(0))
    )


def _materialize(ps: ParticleSet, idx, child_states, child_new, y, log_weights,
                 log_path, hashes=None) -> ParticleSet:
    if hashes is None:
        hashes = _extension_hash(ps, idx, child_states, child_new, y)
    prev = ps.prev_for_next
    ns, t, tr, tc, tt, e, er = _kernels.active.materialize(
        idx, child_states, child_new, prev, ps.n_states, ps.trans, ps.trans_row,
        ps.trans_col, ps.trans_total, ps.emis, ps.emis_row, int(y),
    )
    return ParticleSet(
        states=child_states.astype(np.int64),
        prev_states=prev[idx],
        is_new=child_new.astype(bool),
        n_states=ns,
        trans=t, trans_row=tr, trans_col=tc, trans_total=tt,
        emis=e, emis_row=er,
        log_weights=log_weights,
        log_path=log_path,
        hashes=hashes,
        n=ps.n + 1,
        last_symbol=int(y),
    )


def _normalize(log_w: np.ndarray) -> np.ndarray:
    return log_w - logsumexp(log_w)


# ------------------------------------------------------------------------- SMC


def multinomial_resample(weights, K: int, rng: np.random.Generator) -> np.ndarray:
    """K i.i.d. parent indices drawn from ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
        raise ValueError("weights must be a nonnegative vector summing to 1")
    return rng.choice(len(w), size=K, p=w / w.sum())


def smc_step(ps: ParticleSet, y: int, cfg: FilterConfig,
             rng: np.random.Generator) -> ParticleSet:
    """Bootstrap propagation, emission weighting and multinomial resampling."""
    model = cfg.model
    ps = _ensure_capacity(ps, model)
    K, C = ps.K, ps.capacity
    lt, lt_new = log_transition(ps, model)
    logp = np.concatenate([lt, lt_new[:, None]], axis=1)
    p = np.exp(logp - logp.max(axis=1, keepdims=True))
    cum = np.cumsum(p, axis=1)
    u = (1.0 - rng.random(K)) * cum[:, -1]
    col = np.minimum((cum < u[:, None]).sum(axis=1), C)
    child_new = col == C
    child_states = np.where(child_new, ps.n_states, col)

    le, le_new = log_emission(ps, model, y)
    ar = np.arange(K)
    inc = np.where(child_new, le_new, le[ar, np.minimum(col, C - 1)])
    step_lt = logp[ar, col]
    log_w = ps.log_weights + inc
    if not np.any(np.isfinite(log_w)):
        raise DegenerateFilterError(ps.n + 1, "smc")
    log_w = _normalize(log_w)
    w = np.exp(log_w)
    w = w / w.sum()
    ess = float(1.0 / np.sum(w ** 2))

    children = _materialize(ps, ar, child_states, child_new, y, log_w,
                            ps.log_path + step_lt + inc)
    idx = multinomial_resample(w, cfg.K, rng)
    return ParticleSet(
        states=children.states[idx],
        prev_states=children.prev_states[idx],
        is_new=children.is_new[idx],
        n_states=children.n_states[idx],
        trans=children.trans[idx],
        trans_row=children.trans_row[idx],
        trans_col=children.trans_col[idx],
        trans_total=children.trans_total[idx],
        emis=children.emis[idx],
        emis_row=children.emis_row[idx],
        log_weights=np.full(cfg.K, -math.log(cfg.K)),
        log_path=children.log_path[idx],
        hashes=children.hashes[idx],
        n=children.n,
        last_symbol=children.last_symbol,
        ess=ess,
    )


# ------------------------------------------------------- deterministic filters


@dataclass(frozen=True)
class CandidateEntry:
    parent: int
    state: int
    is_new: bool
    log_w: float


@dataclass(frozen=True, eq=False)
class CandidateGrid:
    """All one-step extensions ``(k, m)`` of a particle set, flattened.

    Entries are ordered by parent, then existing labels ascending, then the new
    state; that order is the selection tie-break.
    """

    parents: ParticleSet
    symbol: int
    parent: np.ndarray
    state: np.ndarray
    is_new: np.ndarray
    log_w: np.ndarray
    log_f: np.ndarray
    child_hash: np.ndarray

    def __len__(self):
        return len(self.parent)

    def entries(self) -> List[CandidateEntry]:
        return [
            CandidateEntry(int(k), int(m), bool(b), float(w))
            for k, m, b, w in zip(self.parent, self.state, self.is_new, self.log_w)
        ]


def lookahead_normalizer(log_f_next: np.ndarray, valid: np.ndarray, variant: str) -> np.ndarray:
    """Per-label denominator of the lookahead factor, in log space.

    ``log_f_next`` and ``valid`` have shape ``(K, L)``; column ``l`` collects
    every parent's candidate with label ``l``. Only parents whose lookahead
    potential is positive take part.
    """
    use = valid & np.isfinite(log_f_next)
    count = use.sum(axis=0)
    safe_count = np.maximum(count, 1)
    if variant == GEOMETRIC_MEAN:
        g = np.where(use, log_f_next, 0.0).sum(axis=0) / safe_count
    elif variant == ARITHMETIC_SUM:
        masked = np.where(use, log_f_next, -np.inf)
        with np.errstate(invalid="ignore"):
            g = logsumexp(masked, axis=0) / safe_count
    else:
        raise ValueError(f"unknown denominator variant {variant!r}")
    return np.where(count > 0, g, 0.0)


def combine_log_weights(log_w_prev, log_f_cur, log_f_next, eps: float, variant: str,
                        valid) -> np.ndarray:
    """``log W(k, m)``: previous weight, free-energy term and regret term."""
    log_w = log_w_prev[:, None] + log_f_cur
    if eps > 0:
        g = lookahead_normalizer(log_f_next, valid, variant)
        log_w = log_w + eps * log_f_next - eps * g[None, :]
    return np.where(valid, log_w, -np.inf)


def candidate_grid(ps: ParticleSet, y_n: int, y_next: Optional[int], eps: float,
                   cfg: FilterConfig) -> CandidateGrid:
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    model = cfg.model
    ps = _ensure_capacity(ps, model)
    K, C = ps.K, ps.capacity
    cur = log_potential_grid(ps, model, y_n)
    valid = np.zeros((K, C + 1), dtype=bool)
    valid[:, :C] = np.arange(C)[None, :] < ps.n_states[:, None]
    valid[:, C] = model.fixed is None
    if eps > 0 and y_next is not None:
        nxt = log_potential_grid(ps, model, y_next)
    else:
        nxt = None
        eps = 0.0
    log_w = combine_log_weights(ps.log_weights, cur, nxt, eps, cfg.denominator_variant, valid)

    parent, col = np.nonzero(valid)
    is_new = col == C
    state = np.where(is_new, ps.n_states[parent], col)
    return CandidateGrid(
        parents=ps,
        symbol=int(y_n),
        parent=parent,
        state=state.astype(np.int64),
        is_new=is_new,
        log_w=log_w[parent, col],
        log_f=cur[parent, col],
        child_hash=_extension_hash(ps, parent, state, is_new, y_n),
    )


def select_k_largest(grid: CandidateGrid, K: int) -> ParticleSet:
    """Keep the K heaviest distinct extensions and renormalize.

    Extensions that reach identical ``(state, counts)`` are one hypothesis:
    their weights are summed and the first in tie-break order represents them.
    Candidates with zero weight are never retained, so fewer than K particles
    survive only when fewer than K distinct positive-weight candidates exist.
    """
    if len(grid) == 0:
        raise ValueError("empty candidate grid")
    uniq, inverse = np.unique(grid.child_hash, return_inverse=True)
    G = len(uniq)
    rep = np.full(G, len(grid), dtype=np.int64)
    np.minimum.at(rep, inverse, np.arange(len(grid)))
    group_max = np.full(G, -np.inf)
    np.maximum.at(group_max, inverse, grid.log_w)
    finite_max = np.where(np.isfinite(group_max), group_max, 0.0)
    with np.errstate(under="ignore"):
        summed = np.zeros(G)
        np.add.at(summed, inverse, np.exp(grid.log_w - finite_max[inverse]))
    with np.errstate(divide="ignore"):
        merged = np.where(np.isfinite(group_max), finite_max + np.log(summed), -np.inf)

    order = np.lexsort((rep, -merged))
    order = order[np.isfinite(merged[order])][:K]
    if len(order) == 0:
        raise DegenerateFilterError(grid.parents.n + 1)
    pick = rep[order]
    parents = grid.parents
    log_w = _normalize(merged[order])
    return _materialize(
        parents, grid.parent[pick], grid.state[pick], grid.is_new[pick], grid.symbol,
        log_w, parents.log_path[grid.parent[pick]] + grid.log_f[pick],
        grid.child_hash[pick],
    )


def mdvpa_step(ps: ParticleSet, y_n: int, y_next: Optional[int],
               cfg: FilterConfig) -> ParticleSet:
    """Deterministic top-K selection with the mirror-descent lookahead term.

    Without a next observation the step size is 0, i.e. a VPA step.
    """
    eps = epsilon_schedule(ps.n + 1, cfg.schedule) if y_next is not None else 0.0
    return select_k_largest(candidate_grid(ps, y_n, y_next, eps, cfg), cfg.K)


def vpa_step(ps: ParticleSet, y_n: int, cfg: FilterConfig) -> ParticleSet:
    return select_k_largest(candidate_grid(ps, y_n, None, 0.0, cfg), cfg.K)
