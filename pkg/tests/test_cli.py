from __future__ import annotations

import json

import numpy as np
import pytest
import scipy.sparse as sp

from gnnsteal import __version__
from gnnsteal.cli import cli, load_schema
from gnnsteal.graph import load_graph_bundle
from gnnsteal.harness import CSV_COLUMNS, ExperimentReport

TINY = {"dataset": {"name": "two-blob"}, "target": {"epochs": 5},
        "attack": {"epochs": 3, "head_epochs": 10, "spectral_pool": 1}}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_version(capsys):
    assert cli(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_schema_is_valid_draft():
    from jsonschema import Draft202012Validator

    Draft202012Validator.check_schema(load_schema())


def test_every_violation_listed(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset": {"nam": "x"}, "attack": {"tau": 0, "loss_kind": "mse"},
                               "extra": 1}))
    assert cli(["train-target", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    for fragment in ("'extra' was unexpected", "'nam' was unexpected", "attack/tau", "attack/loss_kind"):
        assert fragment in err
    assert not (tmp_path / "o").exists()


def test_unknown_subcommand_and_bad_set(config, capsys):
    assert cli(["steal-everything"]) == 1
    assert cli(["train-target", "--config", config, "--set", "novalue"]) == 1
    assert cli(["train-target", "--config", config, "--set", "attack.nonsense=3", "--dry-run"]) == 1


def test_attack_without_target_is_validation_error(config, tmp_path):
    assert cli(["attack", "--config", config, "--out", str(tmp_path)]) == 1
    assert cli(["attack-typeii", "--config", config, "--target", str(tmp_path / "missing")]) == 1


def test_dry_run_writes_nothing(config, tmp_path, capsys):
    out = tmp_path / "o"
    assert cli(["train-target", "--config", config, "--out", str(out), "--dry-run", "--set", "target.epochs=7"]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["command"] == "train-target"
    assert plan["config"]["target"]["epochs"] == 7
    assert not out.exists()


def test_train_target_deterministic(config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli(["train-target", "--config", config, "--seed", "7", "--out", str(a)]) == 0
    assert cli(["train-target", "--config", config, "--seed", "7", "--out", str(b)]) == 0
    fa, fb = _files(a), _files(b)
    assert "target/weights.bin" in fa
    assert fa == fb
    c = tmp_path / "c"
    assert cli(["train-target", "--config", config, "--seed", "8", "--out", str(c)]) == 0
    assert _files(c)["target/weights.bin"] != fa["target/weights.bin"]


def test_attack_pipeline(config, tmp_path):
    out = tmp_path / "o"
    assert cli(["train-target", "--config", config, "--out", str(out)]) == 0
    run = json.loads((out / "target" / "run.json").read_text())
    assert cli(["attack", "--config", config, "--out", str(out), "--target", str(out / "target"),
                "--set", "attack.budget_frac=0.5"]) == 0
    metrics = json.loads((out / "attack" / "metrics.json").read_text())
    assert metrics["queries_used"] == len(run["split"]["query"]) // 2
    assert (out / "attack" / "surrogate" / "steal_meta.json").is_file()
    # the target directory is an input of the attack stage and must not change
    before = _files(out / "target")
    assert cli(["attack-typeii", "--config", config, "--out", str(out), "--target", str(out / "target")]) == 0
    assert _files(out / "target") == before
    assert (out / "attack-typeii" / "learned_graph" / "edges.tsv").is_file()


def test_target_dataset_mismatch(config, tmp_path):
    out = tmp_path / "o"
    assert cli(["train-target", "--config", config, "--out", str(out)]) == 0
    assert cli(["attack", "--config", config, "--out", str(out), "--target", str(out / "target"),
                "--dataset", "sbm-1500"]) == 1


def test_runtime_failure_exit_two(config, tmp_path, monkeypatch):
    monkeypatch.setenv("GNNSTEAL_CITESEER", str(tmp_path / "absent"))
    assert cli(["train-target", "--config", config, "--dataset", "citeseer", "--out", str(tmp_path / "o")]) == 2


def test_defense_sweep_needs_embedding(config):
    assert cli(["sweep-defense", "--config", config, "--dry-run"]) == 1
    assert cli(["sweep-defense", "--config", config, "--dry-run", "--set", "attack.response_kind=embedding"]) == 0


def test_ingest(tmp_path):
    rng = np.random.default_rng(0)
    adj = sp.csr_matrix(np.triu(rng.random((12, 12)) < 0.3, k=1).astype(np.float64))
    attr = sp.csr_matrix(rng.random((12, 4)))
    raw = tmp_path / "toy.npz"
    np.savez(raw, adj_data=adj.data, adj_indices=adj.indices, adj_indptr=adj.indptr, adj_shape=adj.shape,
             attr_data=attr.data, attr_indices=attr.indices, attr_indptr=attr.indptr, attr_shape=attr.shape,
             labels=rng.integers(0, 3, 12))
    assert cli(["ingest", "--raw", str(raw), "--name", "toy_full", "--out", str(tmp_path / "data")]) == 0
    g = load_graph_bundle(tmp_path / "data" / "toy_full")
    assert g.n == 12 and g.num_edges == adj.nnz
    assert cli(["ingest", "--raw", str(tmp_path / "nope.npz"), "--out", str(tmp_path)]) == 1


def _record(**kw):
    base = {"status": "ok", "dataset": "d", "target_arch": "GIN", "surrogate_arch": "GIN",
            "response_kind": "prediction", "attack_type": "I", "loss_kind": "contrastive", "budget_frac": 1.0,
            "sigma": 0.0, "seed": 0, "accuracy": 0.5, "fidelity": 0.75, "f1": 0.4, "queries_used": 10,
            "target_accuracy": 0.8}
    return {**base, **kw}


def test_report_csv_pass_through(tmp_path, capsys):
    cells = tmp_path / "results" / "cells"
    cells.mkdir(parents=True)
    (cells / "a.json").write_text(json.dumps(_record(seed=0)))
    (cells / "b.json").write_text(json.dumps(_record(seed=1, accuracy=0.25)))
    (cells / "c.json").write_text(json.dumps({"status": "failed", "seed": 2}))
    assert cli(["report", "--in", str(tmp_path / "results"), "--format", "csv"]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    report = ExperimentReport.from_csv(text)
    assert sorted(r["accuracy"] for r in report.rows) == [0.25, 0.5]
    assert cli(["report", "--in", str(tmp_path / "results"), "--format", "aggregate",
                "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "report.csv").read_text().startswith("dataset,")
    assert cli(["report", "--in", str(tmp_path / "nothing")]) == 1
