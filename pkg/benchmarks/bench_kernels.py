"""Time the numba kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Each kernel is called on particle sets grown by a short SMC run (so counts
are realistic), first once to trigger compilation, then timed. A final row
times whole VPA runs with each backend swapped in.
"""
import argparse
import time

import numpy as np

from mdvpa import _kernels
from mdvpa.filters import FilterConfig, _ensure_capacity, init_particles, smc_step, vpa_step
from mdvpa.ihmm_core import ModelConfig


def grown(K, V, steps, M0, seed=0):
    rng = np.random.default_rng(seed)
    cfg = FilterConfig(K=K, model=ModelConfig(vocab_size=V), M0=M0)
    ps = init_particles(cfg, rng)
    for y in rng.integers(0, V, size=steps):
        ps = smc_step(ps, int(y), cfg, rng)
    return _ensure_capacity(ps, cfg.model), rng


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_calls(b, ps, rng):
    idx = rng.integers(0, ps.K, size=ps.K)
    new = np.zeros(ps.K, dtype=bool)
    child = np.minimum(ps.states[idx], ps.n_states[idx] - 1)
    args = (ps.prev_for_next, ps.n_states, ps.trans, ps.trans_row, ps.trans_col, ps.trans_total)
    return {
        "transition_logprobs": lambda: b.transition_logprobs(*args, 1.0, 1.0),
        "emission_logprobs": lambda: b.emission_logprobs(ps.emis, ps.emis_row, 1, 1.0),
        "current_log_potential": lambda: b.current_log_potential(
            ps.prev_states, ps.states, ps.is_new, ps.n_states, ps.trans, ps.trans_row,
            ps.trans_col, ps.trans_total, ps.emis, ps.emis_row, ps.last_symbol, 1, 1.0, 1.0, 1.0),
        "materialize": lambda: b.materialize(
            idx, child, new, ps.prev_for_next, ps.n_states, ps.trans, ps.trans_row,
            ps.trans_col, ps.trans_total, ps.emis, ps.emis_row, 1),
    }


def vpa_run(K, V, N, M0):
    ys = np.random.default_rng(1).integers(0, V, size=N)
    cfg = FilterConfig(K=K, model=ModelConfig(vocab_size=V), M0=M0)
    ps = init_particles(cfg, np.random.default_rng(0))
    for y in ys:
        ps = vpa_step(ps, int(y), cfg)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = [_kernels.numpy_backend]
    if _kernels.numba_backend is None:
        print("numba not installed; only the numpy backend is available")
    else:
        backends.append(_kernels.numba_backend)

    cases = [("K=100 V=8 (synthetic)", 100, 8, 60, 0), ("K=50 V=27 M0=50 (text)", 50, 27, 60, 50)]
    print(f"{'kernel':<24}{'case':<26}" + "".join(f"{b.name + ' ms':>12}" for b in backends)
          + f"{'speedup':>10}")
    for label, K, V, steps, M0 in cases:
        ps, rng = grown(K, V, steps, M0)
        calls = {b.name: kernel_calls(b, ps, np.random.default_rng(3)) for b in backends}
        for kernel in calls["numpy"]:
            t = [best_of(calls[b.name][kernel], args.repeat) * 1e3 for b in backends]
            speed = f"{t[0] / t[1]:>9.1f}x" if len(t) > 1 else ""
            print(f"{kernel:<24}{label:<26}" + "".join(f"{x:>12.3f}" for x in t) + speed)

    saved = _kernels.active
    try:
        for label, K, V, N, M0 in [("VPA 300 steps, K=100", 100, 8, 300, 0),
                                   ("VPA 300 steps, K=50 M0=50", 50, 27, 300, 50)]:
            t = []
            for b in backends:
                _kernels.active = b
                t.append(best_of(lambda: vpa_run(K, V, N, M0), max(1, args.repeat // 10)) * 1e3)
            speed = f"{t[0] / t[1]:>9.1f}x" if len(t) > 1 else ""
            print(f"{'end to end':<24}{label:<26}" + "".join(f"{x:>12.1f}" for x in t) + speed)
    finally:
        _kernels.active = saved


if __name__ == "__main__":
    main()
