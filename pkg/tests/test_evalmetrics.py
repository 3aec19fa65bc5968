import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdvpa.evalmetrics import (
    StepRecord,
    aggregate_runs,
    cumulative_loss,
    forward_loglik,
    free_energy,
    loss_term,
    path_free_energy,
    predictive_loglik,
)
from mdvpa.filters import FilterConfig, init_particles, smc_step, vpa_step
from mdvpa.ihmm_core import HmmSpec, ModelConfig

from oracles import brute_loglik, enumerate_joint, random_stochastic


def fixed(spec, K):
    return FilterConfig(K=K, model=ModelConfig(vocab_size=spec.vocab_size, fixed=spec))


def run_vpa(spec, K, ys):
    cfg = fixed(spec, K)
    ps = init_particles(cfg, np.random.default_rng(0))
    for y in ys:
        ps = vpa_step(ps, y, cfg)
    return ps, cfg.model


def random_spec(rng, S, V, zero_frac=0.0):
    return HmmSpec(random_stochastic(rng, S, S, zero_frac),
                   random_stochastic(rng, S, V, zero_frac),
                   random_stochastic(rng, 1, S)[0])


# ------------------------------------------------------------------ forward


def test_forward_iid_uniform():
    total, steps = forward_loglik(HmmSpec([[1.0]], [[0.5, 0.5]]), [0, 1, 1, 0])
    assert total == pytest.approx(4 * math.log(0.5), abs=1e-15)
    np.testing.assert_allclose(steps, math.log(0.5))


def test_forward_symmetric_deterministic_emissions():
    spec = HmmSpec([[0.8, 0.2], [0.2, 0.8]], [[1.0, 0.0], [0.0, 1.0]])
    ys = [0, 0, 1, 1, 1, 0, 1, 0]
    total, steps = forward_loglik(spec, ys)
    # the hidden path equals the observations, so the enumeration has one term
    expected = math.log(0.5) + 3 * math.log(0.8) + 4 * math.log(0.2)
    assert total == pytest.approx(expected, abs=1e-12)
    assert total == pytest.approx(brute_loglik(spec.transition, spec.emission,
                                               spec.initial, ys), abs=1e-12)
    assert steps.sum() == pytest.approx(total, abs=1e-12)


def test_forward_impossible_sequence():
    spec = HmmSpec([[1.0]], [[1.0, 0.0]])
    total, steps = forward_loglik(spec, [0, 1, 0])
    assert total == -math.inf
    assert steps[1] == -math.inf


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 4), st.integers(1, 8),
       st.sampled_from([0.0, 0.3]))
def test_forward_matches_enumeration(seed, S, V, N, zero_frac):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, S, V, zero_frac)
    ys = rng.integers(0, V, size=N).tolist()
    total, steps = forward_loglik(spec, ys)
    oracle = brute_loglik(spec.transition, spec.emission, spec.initial, ys)
    if oracle == -math.inf:
        assert total == -math.inf
    else:
        assert abs(total - oracle) <= 1e-12
        assert abs(steps.sum() - total) <= 1e-12


# -------------------------------------------------------- predictive loglik


def test_predictive_single_known_state():
    spec = HmmSpec([[0.5, 0.5], [0.5, 0.5]], [[0.25, 0.75], [0.25, 0.75]], initial=[1.0, 0.0])
    ps, model = run_vpa(spec, 1, [1])
    assert ps.states.tolist() == [0]
    assert predictive_loglik(ps, 0, model) == pytest.approx(math.log(0.25), abs=1e-15)


def test_predictive_ignores_zero_weight_particle():
    spec = HmmSpec([[0.9, 0.1], [0.3, 0.7]], [[0.6, 0.4], [0.2, 0.8]])
    ps, model = run_vpa(spec, 2, [0])
    assert ps.K == 2
    lone = replace(ps, log_weights=np.array([0.0, -np.inf]), hashes=ps.hashes)
    only = replace(ps, states=ps.states[:1], prev_states=ps.prev_states[:1],
                   is_new=ps.is_new[:1], n_states=ps.n_states[:1], trans=ps.trans[:1],
                   trans_row=ps.trans_row[:1], trans_col=ps.trans_col[:1],
                   trans_total=ps.trans_total[:1], emis=ps.emis[:1], emis_row=ps.emis_row[:1],
                   log_weights=np.array([0.0]), log_path=ps.log_path[:1], hashes=None)
    assert predictive_loglik(lone, 1, model) == predictive_loglik(only, 1, model)


@pytest.mark.parametrize("seed", range(5))
def test_predictive_exact_when_particles_enumerate(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, 3, 3)
    ys = rng.integers(0, 3, size=6).tolist()
    _, oracle = forward_loglik(spec, ys)
    cfg = fixed(spec, 3 ** len(ys))
    ps = init_particles(cfg, rng)
    for i, y in enumerate(ys):
        assert abs(predictive_loglik(ps, y, cfg.model) - oracle[i]) <= 1e-10
        ps = vpa_step(ps, y, cfg)


# -------------------------------------------------------------------- loss


@pytest.mark.parametrize("second,expected", [
    (0.125, 2 * math.log(2)),  # -(log 1/2 + log 1/8) / 2 = 4 log 2 / 2
    (0.25, 1.5 * math.log(2)),
])
def test_loss_two_particles(second, expected):
    e = second / 0.5
    spec = HmmSpec([[0.5, 0.5], [0.5, 0.5]], [[1.0, 0.0], [e, 1 - e]], initial=[0.5, 0.5])
    ps, model = run_vpa(spec, 2, [0])
    assert ps.states.tolist() == [0, 1]
    assert np.exp(ps.log_weights).tolist() == pytest.approx([0.5 / (0.5 + second),
                                                             second / (0.5 + second)])
    assert loss_term(ps, 0, model) == pytest.approx(expected, abs=1e-15)


def test_loss_constant_potential():
    spec = HmmSpec([[1.0]], [[0.3, 0.7]])
    ps, model = run_vpa(spec, 3, [1, 1])
    assert loss_term(ps, 0, model) == pytest.approx(-math.log(0.3), abs=1e-15)


def test_loss_monotone_in_potential():
    lo = HmmSpec([[1.0]], [[0.3, 0.7]])
    hi = HmmSpec([[1.0]], [[0.6, 0.4]])
    a, ma = run_vpa(lo, 1, [1])
    b, mb = run_vpa(hi, 1, [1])
    assert loss_term(b, 0, mb) < loss_term(a, 0, ma)


def test_loss_infinite_on_zero_potential():
    spec = HmmSpec([[1.0]], [[1.0, 0.0]])
    ps, model = run_vpa(spec, 1, [0])
    assert loss_term(ps, 1, model) == math.inf


# ------------------------------------------------------------- free energy


def test_free_energy_certain_particle():
    spec = HmmSpec([[1.0]], [[1.0]])
    ps, model = run_vpa(spec, 1, [0])
    assert free_energy(ps, 0, model) == 0.0


def test_free_energy_uniform_particles():
    spec = HmmSpec([[1.0]], [[0.3, 0.7]])
    cfg = fixed(spec, 5)
    rng = np.random.default_rng(0)
    ps = smc_step(init_particles(cfg, rng), 0, cfg, rng)
    assert free_energy(ps, 0, cfg.model) == pytest.approx(math.log(0.3) + math.log(5), abs=1e-14)


def _decomposition_terms(spec, ys, log_q):
    """``(log Z, KL[Q || p(x | y)], L[Q])`` by enumerating every path."""
    joint = enumerate_joint(spec.transition, spec.emission, spec.initial, ys)
    log_z = math.log(sum(joint.values()))
    kl = sum(math.exp(lq) * (lq - (math.log(joint[x]) - log_z)) for x, lq in log_q.items())
    elbo = sum(math.exp(lq) * (math.log(joint[x]) - lq) for x, lq in log_q.items())
    return log_z, kl, elbo


@pytest.mark.parametrize("K", [4, 3, 2, 1])
@pytest.mark.parametrize("seed", range(6))
def test_free_energy_decomposition_on_filter_output(K, seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, 2, 2)
    ys = rng.integers(0, 2, size=2).tolist()
    ps, model = run_vpa(spec, K, ys)
    log_q = {(int(a), int(b)): float(w)
             for a, b, w in zip(ps.prev_states, ps.states, ps.log_weights)}
    log_z, kl, elbo = _decomposition_terms(spec, ys, log_q)
    assert abs(log_z - (kl + path_free_energy(ps))) <= 1e-9
    assert abs(elbo - path_free_energy(ps)) <= 1e-12
    if K == 4:
        assert abs(kl) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_free_energy_decomposition_arbitrary_q(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, 2, 2)
    ys = rng.integers(0, 2, size=2).tolist()
    q = rng.dirichlet(np.ones(4))
    paths = [(a, b) for a in range(2) for b in range(2)]
    log_q = {x: math.log(p) for x, p in zip(paths, q)}
    log_z, kl, elbo = _decomposition_terms(spec, ys, log_q)
    assert kl >= -1e-12
    assert abs(log_z - (kl + elbo)) <= 1e-9


# ---------------------------------------------------- aggregation and losses


def rec(n, seed, pred, loss=0.0, name="vpa"):
    return StepRecord(n, name, seed, pred, loss, 0.0, 1.0)


def test_cumulative_loss():
    assert cumulative_loss([rec(i + 1, 0, -1, l) for i, l in enumerate([1, 2, 3])]).tolist() \
        == [1, 3, 6]
    assert cumulative_loss([rec(i + 1, 0, -1, 0.0) for i in range(4)]).tolist() == [0] * 4
    assert cumulative_loss([rec(1, 0, -1, 2.0), rec(2, 0, -1, None)]).tolist() == [2, 2]


def test_aggregate_two_seeds():
    s = aggregate_runs([rec(1, 0, -1.0), rec(1, 1, -3.0)]).by_filter["vpa"]
    assert s.mean.tolist() == [-2.0]
    assert s.variance.tolist() == [2.0]
    assert s.count.tolist() == [2]


def test_aggregate_identical_seeds_and_single_seed():
    same = aggregate_runs([rec(1, 0, -1.5), rec(1, 1, -1.5)]).by_filter["vpa"]
    assert same.variance.tolist() == [0.0]
    single = aggregate_runs([rec(1, 0, -1.5)]).by_filter["vpa"]
    assert math.isnan(single.variance[0])


def test_aggregate_groups_filters_and_cumulates():
    recs = [rec(n, s, -float(n + s), loss=float(s + 1), name=f)
            for f in ("smc", "mdvpa") for s in (0, 1) for n in (1, 2, 3)]
    out = aggregate_runs(recs).by_filter
    assert list(out) == ["mdvpa", "smc"]
    np.testing.assert_allclose(out["smc"].mean, [-1.5, -2.5, -3.5])
    np.testing.assert_allclose(out["smc"].cumulative_loss, [1.5, 3.0, 4.5])
    assert np.all(out["smc"].variance >= 0)


def test_metrics_are_pure():
    spec = HmmSpec([[0.9, 0.1], [0.3, 0.7]], [[0.6, 0.4], [0.2, 0.8]])
    ps, model = run_vpa(spec, 3, [0, 1, 1])
    for fn in (predictive_loglik, loss_term, free_energy):
        assert fn(ps, 0, model) == fn(ps, 0, model)
    assert predictive_loglik(ps, 0, model) <= 0
