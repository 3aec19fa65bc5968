import csv
import json
import math

import numpy as np
import pytest

from mdvpa.cli import (
    RECORD_HEADER,
    ExperimentConfig,
    emit_plot_data,
    main,
    parse_seeds,
    plot_data,
    read_records,
    run_experiment,
    run_filter,
)
from mdvpa.datasets import DataError, LabeledSequence, write_sequence
from mdvpa.evalmetrics import StepRecord
from mdvpa.filters import FilterConfig
from mdvpa.ihmm_core import HmmSpec, ModelConfig


@pytest.fixture
def seq_file(tmp_path):
    rng = np.random.default_rng(4)
    seq = LabeledSequence(rng.integers(0, 4, size=40), 4, (20,))
    path = tmp_path / "seq.txt"
    write_sequence(seq, path)
    return path


def run_cli(tmp_path, seq_file, name="out", *extra):
    out = tmp_path / name
    code = main(["--dataset", "file", "--input", str(seq_file), "--particles", "6",
                 "--seeds", "0-2", "--out", str(out), *extra])
    return code, out


def test_cli_writes_outputs(tmp_path, seq_file):
    code, out = run_cli(tmp_path, seq_file, "out", "--plot")
    assert code == 0
    rows = list(csv.reader(open(out / "records.csv")))
    assert rows[0] == RECORD_HEADER
    assert len(rows) == 1 + 3 * 3 * 40
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["dataset"]["boundaries"] == [21]
    assert meta["failures"] == {}
    blocks = (out / "plot.tsv").read_text().strip().split("\n\n")
    assert [b.splitlines()[0] for b in blocks] == ["# filter=mdvpa", "# filter=smc",
                                                   "# filter=vpa"]
    assert all(len(b.splitlines()) == 2 + 40 for b in blocks)


def test_cli_records_are_ordered(tmp_path, seq_file):
    _, out = run_cli(tmp_path, seq_file)
    recs = read_records(out / "records.csv")
    by_run = {}
    for r in recs:
        by_run.setdefault((r.filter_name, r.seed), []).append(r)
    for rs in by_run.values():
        assert [r.n for r in rs] == list(range(1, 41))
        assert rs[-1].loss is None
        assert all(r.pred_loglik <= 0 for r in rs)
    smc = by_run[("smc", 0)]
    assert all(r.ess is not None and 1 <= r.ess <= 6 for r in smc)
    assert all(r.ess is None for r in by_run[("vpa", 0)])


def test_cli_deterministic(tmp_path, seq_file):
    _, a = run_cli(tmp_path, seq_file, "a")
    _, b = run_cli(tmp_path, seq_file, "b")
    for name in ("records.csv", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


@pytest.mark.parametrize("argv", [
    ["--dataset", "nope"],
    ["--filters", "smc,bogus"],
    ["--particles", "0"],
    ["--denominator", "median"],
    ["--schedule", "constant:-1"],
])
def test_cli_usage_errors(tmp_path, argv):
    with pytest.raises(SystemExit) as e:
        main([*argv, "--out", str(tmp_path)])
    assert e.value.code == 1


def test_cli_requires_out():
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1


def test_cli_data_errors(tmp_path, capsys):
    assert main(["--dataset", "file", "--input", str(tmp_path / "absent"),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["--dataset", "msnbc", "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.seq"
    bad.write_text("1 2\n3 99\n")
    assert main(["--dataset", "msnbc", "--input", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert ":2:" in capsys.readouterr().err


def test_degenerate_run_is_recorded(tmp_path):
    # a nonparametric model never degenerates, so feed a fixed HMM directly
    spec = HmmSpec([[1.0]], [[1.0, 0.0]])
    fcfg = FilterConfig(K=2, model=ModelConfig(vocab_size=2, fixed=spec))
    recs, err = run_filter("vpa", [0, 0, 1, 0], fcfg)
    assert len(recs) == 2
    assert "step 3" in err


def test_plot_single_seed_has_empty_variance():
    recs = [StepRecord(n, "vpa", 0, -1.0, 0.5, 0.0, 1.0) for n in (1, 2)]
    lines = plot_data(recs).splitlines()
    assert lines[2].split("\t") == ["1", "-1.0", "", "0.5"]


def test_plot_variance_can_be_omitted():
    recs = [StepRecord(1, "vpa", s, -1.0 - s, 0.5, 0.0, 1.0) for s in (0, 1)]
    assert plot_data(recs, with_variance=True).splitlines()[2].split("\t")[2] == "0.5"
    assert plot_data(recs, with_variance=False).splitlines()[2].split("\t")[2] == ""
    assert ExperimentConfig(dataset="msnbc").plot_variance is False
    assert ExperimentConfig(dataset="synthetic").plot_variance is True


def test_emit_plot_rejects_malformed(tmp_path):
    path = tmp_path / "records.csv"
    path.write_text(",".join(RECORD_HEADER) + "\n1,vpa,0,-1.0,,0.0,1.0,\n2,vpa,0,oops,,0,1,\n")
    with pytest.raises(DataError, match="row 3"):
        emit_plot_data(path, tmp_path / "plot.tsv")
    path.write_text("a,b\n")
    with pytest.raises(DataError, match="row 1"):
        read_records(path)


def test_emit_plot_from_records(tmp_path, seq_file):
    _, out = run_cli(tmp_path, seq_file, "o", "--filters", "vpa,smc")
    emit_plot_data(out / "records.csv", tmp_path / "p.tsv")
    text = (tmp_path / "p.tsv").read_text()
    assert text.count("# filter=") == 2
    assert text.index("# filter=smc") < text.index("# filter=vpa")


def test_parse_seeds():
    assert parse_seeds("0-3") == (0, 1, 2, 3)
    assert parse_seeds("5,1-2") == (5, 1, 2)


def test_presets():
    assert ExperimentConfig(dataset="synthetic").K == 100
    t = ExperimentConfig(dataset="text")
    assert (t.K, t.M0) == (50, 50)
    assert len(ExperimentConfig(dataset="synthetic").seeds) == 20


def test_text_preset_shape():
    cfg = ExperimentConfig(dataset="text", filter_names=("vpa",), seeds=(0,), K=3, M0=5,
                           chars_per_source=20)
    recs, fails = run_experiment(cfg)
    assert fails == {}
    assert len(recs) == 60
    assert all(math.isfinite(r.pred_loglik) for r in recs)
