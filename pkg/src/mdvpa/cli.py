"""Experiment runner: multi-seed filtering runs written as CSV.

Outputs in ``--out``:
    records.csv   one row per (filter, seed, step)
    summary.csv   per (filter, step) mean/variance across seeds
    metadata.json configuration, dataset notes, failed runs
    plot.tsv      with ``--plot``; one tab-separated block per filter

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .datasets import (
    TEXT_SOURCE_NOTE,
    DataError,
    LabeledSequence,
    build_synthetic_experiment,
    bundled_text_paths,
    load_text_chars,
    msnbc_stream,
    parse_msnbc,
    read_sequence,
)
from .evalmetrics import (
    StepRecord,
    aggregate_runs,
    free_energy,
    loss_term,
    predictive_loglik,
)
from .filters import (
    DENOMINATOR_VARIANTS,
    DegenerateFilterError,
    FilterConfig,
    ParticleSet,
    init_particles,
    mdvpa_step,
    smc_step,
    vpa_step,
)
from .ihmm_core import ModelConfig

FILTER_NAMES = ("smc", "vpa", "mdvpa")
DATASETS = ("synthetic", "text", "msnbc", "file")
RECORD_HEADER = ["n", "filter", "seed", "pred_loglik", "loss", "free_energy", "mean_M", "ess"]
SUMMARY_HEADER = ["filter", "n", "mean_pred_loglik", "var_pred_loglik", "count",
                  "mean_cumulative_loss"]

PRESETS = {
    "synthetic": dict(K=100, M0=0, seeds=tuple(range(20))),
    "text": dict(K=50, M0=50, seeds=tuple(range(10))),
    "msnbc": dict(K=100, M0=0, seeds=tuple(range(5))),
    "file": dict(K=100, M0=0, seeds=tuple(range(10))),
}


class InvariantViolation(AssertionError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    filter_names: Tuple[str, ...] = FILTER_NAMES
    K: Optional[int] = None
    M0: Optional[int] = None
    seeds: Optional[Tuple[int, ...]] = None
    alpha: float = 1.0
    gamma: float = 1.0
    emission_beta: float = 1.0
    schedule: str = "reciprocal"
    denominator_variant: str = "geometric_mean"
    output_dir: Optional[str] = None
    input: Optional[str] = None
    data_seed: int = 0
    chars_per_source: int = 600
    max_events: int = 10_000
    plot: bool = False
    plot_variance: Optional[bool] = None

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {DATASETS}")
        preset = PRESETS[self.dataset]
        if self.K is None:
            self.K = preset["K"]
        if self.M0 is None:
            self.M0 = preset["M0"]
        if self.seeds is None:
            self.seeds = preset["seeds"]
        self.filter_names = tuple(self.filter_names)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.filter_names or not set(self.filter_names) <= set(FILTER_NAMES):
            raise ValueError(f"filters must be a non-empty subset of {FILTER_NAMES}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.plot_variance is None:
            # the web-click figure shows no estimation error
            self.plot_variance = self.dataset != "msnbc"


def load_dataset(cfg: ExperimentConfig) -> LabeledSequence:
    if cfg.dataset == "synthetic":
        return build_synthetic_experiment(np.random.default_rng(cfg.data_seed))
    if cfg.dataset == "text":
        if cfg.input:
            paths = [p for p in cfg.input.split(",") if p]
            note = None
        else:
            paths = bundled_text_paths()
            note = TEXT_SOURCE_NOTE
        seq = load_text_chars(paths, cfg.chars_per_source)
        if note:
            seq.metadata["deviation"] = note
        return seq
    if cfg.dataset == "msnbc":
        if not cfg.input:
            raise DataError("the msnbc dataset needs --input pointing at msnbc990928.seq")
        return msnbc_stream(parse_msnbc(cfg.input), cfg.max_events)
    if not cfg.input:
        raise DataError("the file dataset needs --input")
    return read_sequence(cfg.input)


def check_invariants(ps: ParticleSet, name: str) -> None:
    """Normalized weights, conserved transition counts, and (for the
    deterministic filters) strictly positive weight on every kept particle."""
    total = float(np.exp(ps.log_weights).sum())
    if abs(total - 1.0) > 1e-10:
        raise InvariantViolation(f"{name} step {ps.n}: weights sum to {total!r}")
    if np.any(ps.trans_total != ps.n - 1):
        raise InvariantViolation(f"{name} step {ps.n}: transition count is not n - 1")
    if name != "smc" and not np.all(np.isfinite(ps.log_weights)):
        raise InvariantViolation(f"{name} step {ps.n}: a retained particle has zero weight")


def run_filter(name: str, symbols: Sequence[int], fcfg: FilterConfig
               ) -> Tuple[List[StepRecord], Optional[str]]:
    """Stream ``symbols`` through one filter; returns records and a failure message."""
    model = fcfg.model
    rng = np.random.default_rng(fcfg.seed)
    ps = init_particles(fcfg, rng)
    records = []
    N = len(symbols)
    for i in range(N):
        y = int(symbols[i])
        y_next = int(symbols[i + 1]) if i + 1 < N else None
        pred = predictive_loglik(ps, y, model)
        try:
            if name == "smc":
                ps = smc_step(ps, y, fcfg, rng)
            elif name == "vpa":
                ps = vpa_step(ps, y, fcfg)
            else:
                ps = mdvpa_step(ps, y, y_next, fcfg)
        except DegenerateFilterError as exc:
            return records, str(exc)
        check_invariants(ps, name)
        records.append(StepRecord(
            n=i + 1,
            filter_name=name,
            seed=fcfg.seed,
            pred_loglik=pred,
            loss=loss_term(ps, y_next, model) if y_next is not None else None,
            free_energy=free_energy(ps, y, model),
            mean_M=float(ps.n_states.mean()),
            ess=ps.ess,
        ))
    return records, None


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def records_to_csv(records: Sequence[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_HEADER)
    for r in records:
        w.writerow([r.n, r.filter_name, r.seed, _fmt(r.pred_loglik), _fmt(r.loss),
                    _fmt(r.free_energy), _fmt(r.mean_M), _fmt(r.ess)])
    return buf.getvalue()


def _parse_float(s: str) -> Optional[float]:
    return None if s == "" else float(s)


def read_records(path) -> List[StepRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RECORD_HEADER:
            raise DataError(f"{path}: row 1: header must be {','.join(RECORD_HEADER)}")
        out = []
        for rowno, row in enumerate(reader, start=2):
            try:
                n, name, seed, pred, loss, fe, mean_m, ess = row
                out.append(StepRecord(int(n), name, int(seed), float(pred),
                                      _parse_float(loss), float(fe), float(mean_m),
                                      _parse_float(ess)))
            except ValueError:
                raise DataError(f"{path}: row {rowno}: malformed record {row!r}") from None
    return out


def summary_to_csv(records: Sequence[StepRecord]) -> str:
    summary = aggregate_runs(records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for name, s in summary.by_filter.items():
        for i in range(len(s.n)):
            w.writerow([name, int(s.n[i]), _fmt(s.mean[i]), _fmt(s.variance[i]),
                        int(s.count[i]), _fmt(s.cumulative_loss[i])])
    return buf.getvalue()


def plot_data(records: Sequence[StepRecord], with_variance: bool = True) -> str:
    summary = aggregate_runs(records)
    blocks = []
    for name, s in summary.by_filter.items():
        lines = [f"# filter={name}", "n\tmean_pred_loglik\tvariance\tcumulative_loss"]
        for i in range(len(s.n)):
            var = _fmt(s.variance[i]) if with_variance else ""
            lines.append(f"{int(s.n[i])}\t{_fmt(s.mean[i])}\t{var}\t{_fmt(s.cumulative_loss[i])}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def emit_plot_data(records_path, out_path, with_variance: bool = True) -> None:
    Path(out_path).write_text(plot_data(read_records(records_path), with_variance))


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_experiment(cfg: ExperimentConfig):
    """Run every (filter, seed) pair and write the output files.

    Returns ``(records, failures)``. Nothing is written until all runs finish.
    """
    seq = load_dataset(cfg)
    model = ModelConfig(vocab_size=seq.vocab_size, alpha=cfg.alpha, gamma=cfg.gamma,
                        emission_beta=cfg.emission_beta)
    records: List[StepRecord] = []
    failures: Dict[str, str] = {}
    for name in sorted(cfg.filter_names):
        for seed in cfg.seeds:
            fcfg = FilterConfig(K=cfg.K, model=model, M0=cfg.M0, schedule=cfg.schedule,
                                seed=seed, denominator_variant=cfg.denominator_variant)
            recs, err = run_filter(name, seq.symbols, fcfg)
            records.extend(recs)
            if err:
                failures[f"{name}/{seed}"] = err

    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "config": asdict(cfg),
            "dataset": {
                "length": len(seq),
                "vocab_size": seq.vocab_size,
                "boundaries": [b + 1 for b in seq.boundaries],
                **seq.metadata,
            },
            "failures": failures,
            "loss_note": "cumulative empirical loss only; minimax shifting regret is not computed",
            "kernel_backend": _kernels.active.name,
        }
        _write_atomic(out / "records.csv", records_to_csv(records))
        _write_atomic(out / "summary.csv", summary_to_csv(records))
        _write_atomic(out / "metadata.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
        if cfg.plot:
            _write_atomic(out / "plot.tsv", plot_data(records, cfg.plot_variance))
    return records, failures


# ------------------------------------------------------------------------- CLI


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_seeds(text: str) -> Tuple[int, ...]:
    """``"0-19"`` or ``"1,4,7"`` (ranges may be mixed in)."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return tuple(seeds)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mdvpa", description="Run iHMM particle-filter experiments.")
    p.add_argument("--dataset", choices=DATASETS, default="synthetic")
    p.add_argument("--filters", default=",".join(FILTER_NAMES),
                   help="comma-separated subset of smc,vpa,mdvpa")
    p.add_argument("--particles", type=int, help="K (preset default per dataset)")
    p.add_argument("--m0", type=int, help="initial number of states")
    p.add_argument("--seeds", help="e.g. 0-19 or 1,2,3")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0, help="emission pseudo-count")
    p.add_argument("--schedule", default="reciprocal",
                   help="'reciprocal' (1/n) or 'constant:<c>'")
    p.add_argument("--denominator", choices=DENOMINATOR_VARIANTS, default="geometric_mean")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--input", help="data path(s): sequence file, MSNBC file or "
                                   "comma-separated text files")
    p.add_argument("--plot", action="store_true", help="also write plot.tsv")
    p.add_argument("--plot-variance", action="store_true", default=None,
                   help="include the variance column even for msnbc")
    p.add_argument("--data-seed", type=int, default=0,
                   help="seed for the synthetic sequence")
    p.add_argument("--chars", type=int, default=600, help="characters per text source")
    p.add_argument("--max-events", type=int, default=10_000, help="msnbc stream length")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig(
            dataset=args.dataset,
            filter_names=tuple(f for f in args.filters.split(",") if f),
            K=args.particles,
            M0=args.m0,
            seeds=parse_seeds(args.seeds) if args.seeds else None,
            alpha=args.alpha,
            gamma=args.gamma,
            emission_beta=args.beta,
            schedule=args.schedule,
            denominator_variant=args.denominator,
            output_dir=args.out,
            input=args.input,
            data_seed=args.data_seed,
            chars_per_source=args.chars,
            max_events=args.max_events,
            plot=args.plot,
            plot_variance=args.plot_variance,
        )
        model = ModelConfig(vocab_size=1, alpha=cfg.alpha, gamma=cfg.gamma,
                            emission_beta=cfg.emission_beta)
        FilterConfig(K=cfg.K, model=model, M0=cfg.M0,
                     schedule=cfg.schedule, denominator_variant=cfg.denominator_variant)
    except (ValueError, TypeError) as exc:
        parser.error(str(exc))
    try:
        _, failures = run_experiment(cfg)
    except DataError as exc:
        print(f"mdvpa: data error: {exc}", file=sys.stderr)
        return 2
    for run, msg in failures.items():
        print(f"mdvpa: {run}: {msg}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
