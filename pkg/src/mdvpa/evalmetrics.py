"""Scores and diagnostics for particle sets and experiment records."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .filters import ParticleSet, current_log_potential, log_potential_grid
from .ihmm_core import HmmSpec, ModelConfig


@dataclass(frozen=True)
class StepRecord:
    n: int
    filter_name: str
    seed: int
    pred_loglik: float
    loss: Optional[float]
    free_energy: float
    mean_M: float
    ess: Optional[float] = None


@dataclass
class FilterSummary:
    n: np.ndarray
    mean: np.ndarray
    variance: np.ndarray  # NaN where fewer than two seeds
    count: np.ndarray
    cumulative_loss: np.ndarray


@dataclass
class RunSummary:
    by_filter: Dict[str, FilterSummary]


def predictive_loglik(ps: ParticleSet, y_next: int, model: ModelConfig) -> float:
    """Particle estimate of ``log p(y_next | y_1..y_n)``.

    Mixture over particles of each particle's one-step-ahead predictive,
    summed over all of its candidate next states. ``-inf`` when every term is 0.
    """
    grid = log_potential_grid(ps, model, y_next)
    return float(logsumexp(ps.log_weights[:, None] + grid))


def loss_term(ps: ParticleSet, y_next: int, model: ModelConfig) -> float:
    """Negated particle average of ``log f(x_n^k, y_next)``; ``inf`` if any f is 0."""
    lf = current_log_potential(ps, model, y_next)
    return float(-np.mean(lf))


def free_energy(ps: ParticleSet, y_n: int, model: ModelConfig) -> float:
    """Negative free energy ``sum_k w_k log(f(x_n^k, y_n) / w_k)``.

    Zero-weight particles contribute nothing.
    """
    lf = current_log_potential(ps, model, y_n)
    w = ps.weights
    keep = w > 0
    return float(np.sum(w[keep] * (lf[keep] - ps.log_weights[keep])))


def path_free_energy(ps: ParticleSet) -> float:
    """Free energy of the set viewed as weights over whole trajectories."""
    w = ps.weights
    keep = w > 0
    return float(np.sum(w[keep] * (ps.log_path[keep] - ps.log_weights[keep])))


def forward_loglik(spec: HmmSpec, ys: Sequence[int]) -> Tuple[float, np.ndarray]:
    """Exact ``log p(y_1..y_N)`` and the per-step ``log p(y_n | y_<n)``."""
    with np.errstate(divide="ignore"):
        log_t = np.log(spec.transition)
        log_e = np.log(spec.emission)
        log_a = np.log(spec.initial)
    per_step = np.empty(len(ys))
    for i, y in enumerate(ys):
        if not 0 <= y < spec.vocab_size:
            raise ValueError(f"symbol {y} at position {i} outside 0..{spec.vocab_size - 1}")
        if i > 0:
            log_a = logsumexp(log_a[:, None] + log_t, axis=0)
        log_a = log_a + log_e[:, y]
        per_step[i] = logsumexp(log_a)
        if np.isfinite(per_step[i]):
            log_a = log_a - per_step[i]
    return float(per_step.sum()), per_step


def cumulative_loss(records: Iterable[StepRecord]) -> np.ndarray:
    """Prefix sums of ``loss``; a missing loss adds nothing."""
    losses = [0.0 if r.loss is None or math.isnan(r.loss) else r.loss for r in records]
    return np.cumsum(np.array(losses, dtype=np.float64))


def aggregate_runs(records: Iterable[StepRecord]) -> RunSummary:
    """Per (filter, n) mean and unbiased variance of ``pred_loglik`` across seeds."""
    runs: Dict[str, Dict[int, List[StepRecord]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        runs[r.filter_name][r.seed].append(r)
    out = {}
    for name in sorted(runs):
        per_n: Dict[int, List[float]] = defaultdict(list)
        cum_n: Dict[int, List[float]] = defaultdict(list)
        for seed_records in runs[name].values():
            seed_records = sorted(seed_records, key=lambda r: r.n)
            cum = cumulative_loss(seed_records)
            for r, c in zip(seed_records, cum):
                per_n[r.n].append(r.pred_loglik)
                cum_n[r.n].append(c)
        ns = np.array(sorted(per_n))
        vals = [np.array(per_n[n]) for n in ns]
        count = np.array([len(v) for v in vals])
        mean = np.array([v.mean() for v in vals])
        with np.errstate(invalid="ignore"):
            var = np.array([v.var(ddof=1) if len(v) > 1 else np.nan for v in vals])
        cum_mean = np.array([np.mean(cum_n[n]) for n in ns])
        out[name] = FilterSummary(ns, mean, var, count, cum_mean)
    return RunSummary(out)
