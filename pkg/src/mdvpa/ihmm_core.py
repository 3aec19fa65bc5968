"""Marginalized infinite HMM: sufficient statistics and predictive terms.

States and symbols are 0-based. For a statistics value with ``M`` instantiated
states, index ``M`` denotes the not-yet-instantiated ("new") state; predictive
distributions over transitions therefore have length ``M + 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class HmmSpec:
    """A fully known categorical HMM."""

    transition: np.ndarray
    emission: np.ndarray
    initial: Optional[np.ndarray] = None

    def __post_init__(self):
        trans = np.array(self.transition, dtype=np.float64)
        emis = np.array(self.emission, dtype=np.float64)
        if trans.ndim != 2 or trans.shape[0] != trans.shape[1]:
            raise ValueError(f"transition must be square, got shape {trans.shape}")
        if emis.ndim != 2 or emis.shape[0] != trans.shape[0]:
            raise ValueError(
                f"emission must have {trans.shape[0]} rows, got shape {emis.shape}"
            )
        init = (
            np.full(trans.shape[0], 1.0 / trans.shape[0])
            if self.initial is None
            else np.array(self.initial, dtype=np.float64)
        )
        if init.shape != (trans.shape[0],):
            raise ValueError(f"initial must have length {trans.shape[0]}")
        for name, arr in (("transition", trans), ("emission", emis), ("initial", init)):
            if np.any(arr < 0) or np.any(arr > 1):
                raise ValueError(f"{name} entries must lie in [0, 1]")
            if np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-12):
                raise ValueError(f"{name} rows must sum to 1")
        for arr in (trans, emis, init):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", trans)
        object.__setattr__(self, "emission", emis)
        object.__setattr__(self, "initial", init)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.emission.shape[1]


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the marginalized model.

    ``fixed`` switches every potential to the given known HMM, which is how the
    filters are checked against exact forward-algorithm results.
    """

    vocab_size: int
    alpha: float = 1.0
    gamma: float = 1.0
    emission_beta: float = 1.0
    fixed: Optional[HmmSpec] = None

    def __post_init__(self):
        if not (self.alpha > 0 and self.gamma > 0 and self.emission_beta > 0):
            raise ValueError("alpha, gamma and emission_beta must be positive")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.fixed is not None and self.fixed.vocab_size != self.vocab_size:
            raise ValueError(
                f"fixed HMM emits {self.fixed.vocab_size} symbols, "
                f"vocab_size is {self.vocab_size}"
            )

    @property
    def is_fixed(self) -> bool:
        return self.fixed is not None


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """Per-particle count summary: state count, transition and emission counts.

    Counts are stored densely; ``trans[j, c]`` is the number of recorded
    ``j -> c`` transitions and ``emis[s, v]`` the number of times state ``s``
    emitted ``v``. Values are immutable.
    """

    M: int
    trans: np.ndarray = field(repr=False)
    emis: np.ndarray = field(repr=False)

    @property
    def vocab_size(self) -> int:
        return self.emis.shape[1]

    @property
    def new_state(self) -> int:
        return self.M

    @property
    def trans_row_totals(self) -> np.ndarray:
        return self.trans.sum(axis=1)

    @property
    def trans_col_totals(self) -> np.ndarray:
        return self.trans.sum(axis=0)

    @property
    def trans_grand_total(self) -> int:
        return int(self.trans.sum())

    @property
    def emis_row_totals(self) -> np.ndarray:
        return self.emis.sum(axis=1)

    def __eq__(self, other):
        if not isinstance(other, SufficientStats):
            return NotImplemented
        return (
            self.M == other.M
            and np.array_equal(self.trans, other.trans)
            and np.array_equal(self.emis, other.emis)
        )

    def __hash__(self):
        return hash((self.M, self.trans.tobytes(), self.emis.tobytes()))


def new_stats(M0: int, vocab_size: int) -> SufficientStats:
    if M0 < 0:
        raise ValueError("M0 must be nonnegative")
    return SufficientStats(
        M=M0,
        trans=_frozen(np.zeros((M0, M0), dtype=np.int64)),
        emis=_frozen(np.zeros((M0, vocab_size), dtype=np.int64)),
    )


def crf_transition_predictive(
    stats: SufficientStats, cfg: ModelConfig, prev_state: Optional[int]
) -> np.ndarray:
    """Two-level Chinese-restaurant-franchise predictive ``p(c | prev)``.

    Returns an array of length ``M + 1``; the last entry is the new state.
    With ``prev_state=None`` (first observation) only the global level applies.
    """
    alpha, gamma = cfg.alpha, cfg.gamma
    col = stats.trans_col_totals.astype(np.float64)
    total = float(stats.trans_grand_total)
    out = np.empty(stats.M + 1)
    if prev_state is None:
        out[:-1] = col / (total + gamma)
        out[-1] = gamma / (total + gamma)
        return out
    if not 0 <= prev_state < stats.M:
        raise ValueError(f"prev_state {prev_state} outside 0..{stats.M - 1}")
    row = stats.trans[prev_state].astype(np.float64)
    r = row.sum()
    out[:-1] = (row + alpha * col / (total + gamma)) / (r + alpha)
    out[-1] = alpha * gamma / ((r + alpha) * (total + gamma))
    return out


def emission_predictive(
    stats: SufficientStats, cfg: ModelConfig, state: int, symbol: int
) -> float:
    """Dirichlet-multinomial predictive ``p(symbol | state)``."""
    V, beta = cfg.vocab_size, cfg.emission_beta
    if not 0 <= symbol < V:
        raise ValueError(f"symbol {symbol} outside 0..{V - 1}")
    if state == stats.M:
        return 1.0 / V
    if not 0 <= state < stats.M:
        raise ValueError(f"state {state} outside 0..{stats.M}")
    row = stats.emis[state]
    return float((row[symbol] + beta) / (row.sum() + V * beta))


def potential(
    stats: SufficientStats,
    cfg: ModelConfig,
    prev_state: Optional[int],
    state: int,
    symbol: int,
) -> float:
    """``f(x, y) = p(y | x) p(x | prev)`` under the configured mode."""
    if cfg.fixed is not None:
        spec = cfg.fixed
        if not 0 <= symbol < cfg.vocab_size:
            raise ValueError(f"symbol {symbol} outside 0..{cfg.vocab_size - 1}")
        trans = spec.initial[state] if prev_state is None else spec.transition[prev_state, state]
        return float(spec.emission[state, symbol] * trans)
    trans = crf_transition_predictive(stats, cfg, prev_state)
    if not 0 <= state <= stats.M:
        raise ValueError(f"state {state} outside 0..{stats.M}")
    return float(emission_predictive(stats, cfg, state, symbol) * trans[state])


def log_potential(stats, cfg, prev_state, state, symbol) -> float:
    p = potential(stats, cfg, prev_state, state, symbol)
    return math.log(p) if p > 0 else -math.inf


def update_stats(
    stats: SufficientStats, prev_state: Optional[int], state: int, symbol: int
) -> SufficientStats:
    """Record one step; ``state == stats.M`` instantiates a new state."""
    M = stats.M + 1 if state == stats.M else stats.M
    if not 0 <= state < M:
        raise ValueError(f"state {state} outside 0..{stats.M}")
    trans = np.zeros((M, M), dtype=np.int64)
    trans[: stats.M, : stats.M] = stats.trans
    emis = np.zeros((M, stats.vocab_size), dtype=np.int64)
    emis[: stats.M] = stats.emis
    if prev_state is not None:
        if not 0 <= prev_state < stats.M:
            raise ValueError(f"prev_state {prev_state} outside 0..{stats.M - 1}")
        trans[prev_state, state] += 1
    emis[state, symbol] += 1
    return SufficientStats(M=M, trans=_frozen(trans), emis=_frozen(emis))
