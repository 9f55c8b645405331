import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

import embdistill.experiment as experiment
from embdistill.cli import main
from embdistill.data import load_embeddings
from embdistill.errors import ConfigError
from embdistill.experiment import METHODS, parse_config, validation_errors
from embdistill.retrieval import evaluate
from embdistill.trainer import LOSSES, METRIC_LOSSES


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--preset", "separable", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "small"
    assert main(["synth", "--preset", "separable", "--teacher-dim", "48", "--out", str(out)]) == 0
    return out


def test_synth_writes_manifest_and_sets(data_dir):
    text = (data_dir / "manifest.txt").read_text()
    assert "train = train.emb" in text
    assert load_embeddings(data_dir / "val.emb").n == 513


def test_synth_benchmark_shape(tmp_path):
    assert main(["synth", "--preset", "benchmark-shape", "--out", str(tmp_path / "p")]) == 0
    val = load_embeddings(tmp_path / "p" / "val.emb")
    assert len(val.clique_members) == 1000
    assert {len(m) for m in val.clique_members.values()} == {13}
    assert sum(c is None for c in val.cliques) == 2000


def test_synth_transposition(tmp_path):
    assert main(["synth", "--task", "transposition", "--teacher-dim", "48", "--out", str(tmp_path / "t")]) == 0
    assert "raw_train = raw_train.emb" in (tmp_path / "t" / "manifest.txt").read_text()


def test_evaluate_twice_identical(data_dir, tmp_path):
    for name in ("a.json", "b.json"):
        assert main(["evaluate", str(data_dir / "val.emb"), "--out", str(tmp_path / name),
                     "--per-query", "--no-timing", "--csv", str(tmp_path / (name + ".csv"))]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.json.csv").read_bytes() == (tmp_path / "b.json.csv").read_bytes()


def test_pca_16_close_to_full_dim(data_dir, tmp_path):
    out = tmp_path / "pca"
    assert main(["reduce", "--method", "pca", "--dims", "16", "--data", str(data_dir / "manifest.txt"),
                 "--out", str(out)]) == 0
    full = evaluate(load_embeddings(data_dir / "val.emb")).map
    reduced = json.loads((out / "d16" / "report.json").read_text())["map"]
    assert abs(full - reduced) <= 0.02
    assert (out / "d16" / "reducer.red").exists()
    assert load_embeddings(out / "d16" / "embeddings.emb").d == 16


def test_train_writes_checkpoint_and_history(small_data, tmp_path):
    out = tmp_path / "train"
    rc = main(["train", "--loss", "normalized-softmax", "--dim", "128", "--epochs", "3",
               "--data", str(small_data / "manifest.txt"), "--out", str(out)])
    assert rc == 0
    assert (out / "d128" / "checkpoint.ckpt").exists()
    lines = (out / "d128" / "history.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,lr") and len(lines) == 4
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["experiment"]["method"] == "reconfigure"
    assert not (out / ".lock").exists()


def test_distill_and_prune(small_data, tmp_path):
    m = str(small_data / "manifest.txt")
    assert main(["distill", "--method", "cluster-match", "--loss", "triplet", "--dims", "8",
                 "--epochs", "2", "--data", m, "--out", str(tmp_path / "cm")]) == 0
    assert main(["prune", "--loss", "triplet", "--dims", "16,8,3", "--start-dim", "16", "--epochs", "2",
                 "--max-map-drop", "1", "--data", m, "--out", str(tmp_path / "pr")]) == 0
    summary = json.loads((tmp_path / "pr" / "summary.json").read_text())
    assert summary["results"]["8"]["map"] is not None
    assert summary["results"]["3"]["map"] is None
    assert "n/a" in (tmp_path / "pr" / "summary.txt").read_text()


def test_baseline_needs_raw_inputs(small_data, tmp_path):
    rc = main(["train", "--baseline", "--loss", "triplet", "--dim", "8",
               "--data", str(small_data / "manifest.txt"), "--out", str(tmp_path / "b")])
    assert rc == 1
    assert not (tmp_path / "b").exists()


def test_baseline_runs_on_transposition_data(tmp_path):
    d = tmp_path / "t"
    assert main(["synth", "--task", "transposition", "--teacher-dim", "48", "--out", str(d)]) == 0
    rc = main(["train", "--baseline", "--loss", "triplet", "--dim", "8", "--epochs", "2",
               "--data", str(d / "manifest.txt"), "--raw-train", str(d / "raw_train.emb"),
               "--raw-val", str(d / "raw_val.emb"), "--out", str(tmp_path / "b")])
    assert rc == 0


def test_transposition_synth_defaults_to_a_binnable_width(tmp_path):
    assert main(["synth", "--task", "transposition", "--out", str(tmp_path / "t")]) == 0
    assert load_embeddings(tmp_path / "t" / "raw_val.emb").d % 12 == 0


def test_baseline_takes_raw_inputs_from_manifest(tmp_path, monkeypatch):
    d = tmp_path / "t"
    assert main(["synth", "--task", "transposition", "--teacher-dim", "48", "--out", str(d)]) == 0
    monkeypatch.setenv("EMBDISTILL_DATA_DIR", str(d))
    cfg = _toml(tmp_path, """
[experiment]
method = "baseline"
loss = "triplet"
dims = [8]
output = "b"

[data]
manifest = "manifest.txt"

[train]
epochs = 1
""")
    assert main(["run", str(cfg)]) == 0
    resolved = json.loads((tmp_path / "b" / "config.resolved.json").read_text())
    assert resolved["data"]["raw_val"] == str(d / "raw_val.emb")


def test_shipped_configs_are_valid(tmp_path, monkeypatch):
    d = tmp_path / "t"
    assert main(["synth", "--task", "transposition", "--teacher-dim", "48", "--out", str(d)]) == 0
    monkeypatch.setenv("EMBDISTILL_DATA_DIR", str(d))
    configs = sorted((Path(__file__).parents[1] / "configs").glob("*.toml"))
    assert len(configs) >= 8
    methods = {experiment.load_config(c).method for c in configs}
    assert methods == set(METHODS)


def test_report_merges_runs_into_one_table(small_data, tmp_path):
    m = str(small_data / "manifest.txt")
    runs = []
    for d in (4, 8, 16, 32):
        out = tmp_path / f"grp{d}"
        assert main(["reduce", "--method", "grp", "--dims", str(d), "--data", m, "--out", str(out)]) == 0
        runs.append(str(out))
    assert main(["report", *runs, "--out", str(tmp_path / "table.txt")]) == 0
    lines = (tmp_path / "table.txt").read_text().splitlines()
    assert lines[0].split() == ["method", "4", "8", "16", "32"]
    assert len(lines) == 5
    assert sum(cell != "n/a" for cell in lines[1].split()[1:]) == 1


def test_bench_command(tmp_path, capsys):
    assert main(["bench", "--dims", "8,64", "--n-refs", "2000", "--repeats", "2",
                 "--out", str(tmp_path / "b.json")]) == 0
    rows = json.loads((tmp_path / "b.json").read_text())
    assert [r["dim"] for r in rows] == [8, 64] and rows[0]["ratio"] == 1.0
    assert "ratio" in capsys.readouterr().out


def test_refuses_non_empty_output_unless_forced(small_data, tmp_path):
    m = str(small_data / "manifest.txt")
    args = ["reduce", "--method", "pca", "--dims", "4", "--data", m, "--out", str(tmp_path / "o")]
    assert main(args) == 0
    assert main(args) == 1
    assert main(args + ["--force"]) == 0


def test_lock_file_blocks_concurrent_run(small_data, tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    (out / ".lock").write_text("123")
    rc = main(["reduce", "--method", "pca", "--dims", "4", "--data", str(small_data / "manifest.txt"),
               "--out", str(out), "--force"])
    assert rc == 1


def test_usage_errors_exit_1(capsys):
    assert main(["bogus"]) == 1
    assert main(["reduce", "--method", "lda", "--dims", "4", "--out", "x"]) == 1
    assert main(["train", "--loss", "triplet", "--nope", "--out", "x"]) == 1
    assert "usage" in capsys.readouterr().err


def test_runtime_failure_exit_2_with_diagnostic(small_data, tmp_path):
    bad = tmp_path / "bad.emb"
    bad.write_bytes(b"EMBD" + b"\x00" * 40)
    rc = main(["reduce", "--method", "pca", "--dims", "4", "--train", str(bad),
               "--val", str(small_data / "val.emb"), "--out", str(tmp_path / "o")])
    assert rc == 2
    text = (tmp_path / "o" / "error.txt").read_text()
    assert "FormatError" in text
    assert not (tmp_path / "o" / ".lock").exists()


def _toml(tmp_path, body):
    p = tmp_path / "exp.toml"
    p.write_text(body)
    return p


def test_run_from_config_with_data_dir_env(small_data, tmp_path, monkeypatch):
    monkeypatch.setenv("EMBDISTILL_DATA_DIR", str(small_data))
    cfg = _toml(tmp_path, """
[experiment]
method = "reconfigure"
loss = "triplet"
dims = [4, 8]
output = "runs/r"

[data]
manifest = "manifest.txt"

[train]
epochs = 2
lr = 0.05
batch = { classes_per_batch = 8, samples_per_class = 4 }
""")
    assert main(["run", str(cfg)]) == 0
    summary = json.loads((tmp_path / "runs" / "r" / "summary.json").read_text())
    assert set(summary["results"]) == {"4", "8"}
    resolved = json.loads((tmp_path / "runs" / "r" / "config.resolved.json").read_text())
    assert resolved["data"]["train"] == str(small_data / "train.emb")


def test_invalid_config_lists_every_violation(tmp_path, capsys):
    cfg = _toml(tmp_path, """
[experiment]
method = "pca"
loss = "triplet"
dims = [0]
[data]
train = "missing.emb"
""")
    assert main(["run", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "takes no loss" in err and "dims" in err and "output" in err and "val" in err


def test_malformed_toml_is_a_validation_error(tmp_path):
    assert main(["run", str(_toml(tmp_path, "[experiment\nmethod="))]) == 1


def test_missing_input_file_is_a_validation_error(tmp_path):
    cfg = _toml(tmp_path, """
[experiment]
method = "grp"
dims = [4]
output = "o"
[data]
train = "nope.emb"
val = "nope2.emb"
""")
    assert main(["run", str(cfg)]) == 1
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("method,loss,ok", [
    ("pca", None, True), ("ica", "triplet", False), ("grp", None, True),
    ("reconfigure", None, False), ("reconfigure", "group", True), ("reconfigure", "distance-match", False),
    ("prune", "proxynca", True), ("prune", None, False),
    ("distance-match", None, True), ("distance-match", "triplet", True), ("cluster-match", "cluster-match", False),
    ("baseline", "triplet", True),
])
def test_method_loss_compatibility(method, loss, ok):
    raw = {"experiment": {"method": method, "dims": [4], "output": "o"},
           "data": {"train": "a", "val": "b", "raw_train": "c", "raw_val": "d"}}
    if loss:
        raw["experiment"]["loss"] = loss
    errs = validation_errors(raw)
    assert (not errs) == ok, errs


@settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(
    method=st.one_of(st.sampled_from(METHODS), st.text(max_size=8)),
    loss=st.one_of(st.none(), st.sampled_from(LOSSES), st.text(max_size=8)),
    dims=st.one_of(st.lists(st.integers(-2, 64), max_size=4), st.integers(), st.none()),
    extra=st.dictionaries(st.sampled_from(["epochs", "lr", "optimizer", "bogus"]),
                          st.one_of(st.integers(-3, 5), st.floats(-1, 1), st.text(max_size=5)), max_size=2),
)
def test_fuzzed_configs_never_reach_compute_when_invalid(monkeypatch, method, loss, dims, extra):
    touched = []
    monkeypatch.setattr(experiment, "load_embeddings", lambda p: touched.append(p))
    raw = {"experiment": {"method": method, "output": "o"}, "data": {"train": "a", "val": "b"}, "train": extra}
    if loss is not None:
        raw["experiment"]["loss"] = loss
    if dims is not None:
        raw["experiment"]["dims"] = dims
    compatible = (
        method in ("pca", "ica", "grp") and loss is None
        or method in ("reconfigure", "prune") and loss in METRIC_LOSSES
        or method in ("distance-match", "cluster-match") and (loss is None or loss in METRIC_LOSSES)
    )
    errs = validation_errors(raw)
    if not compatible:
        assert errs
    if errs:
        with pytest.raises(ConfigError):
            experiment.execute(parse_config(raw))
        assert not touched


def test_runs_are_byte_identical(small_data, tmp_path):
    m = str(small_data / "manifest.txt")
    for out in ("a", "b"):
        assert main(["distill", "--method", "distance-match", "--loss", "group", "--dims", "6",
                     "--epochs", "2", "--data", m, "--out", str(tmp_path / out)]) == 0
    a, b = tmp_path / "a" / "d6", tmp_path / "b" / "d6"
    assert (a / "embeddings.emb").read_bytes() == (b / "embeddings.emb").read_bytes()
    assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
    ra, rb = (json.loads((p / "report.json").read_text()) for p in (a, b))
    ra.pop("timing"), rb.pop("timing")
    assert ra == rb


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "embdistill.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
