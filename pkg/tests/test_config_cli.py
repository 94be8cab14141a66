import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dartser import cli, experiment
from dartser.config import RunConfig, from_dict, load_config
from dartser.data import load_container

# small enough that a 5-fold, 2-epoch search finishes in about a minute
TINY = {"cells": 3, "init_channels": 2, "nodes": 2, "lstm_units": 8, "dense_widths": [8],
        "search_epochs": 2, "train_epochs": 2, "baseline_channels": 2, "baseline_dense_widths": [8],
        "figures": False}


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


# -- config ------------------------------------------------------------------
def test_defaults_and_roundtrip(tmp_path):
    cfg = RunConfig()
    assert cfg.network.reduction_indices == (1, 2)
    assert from_dict(json.loads(cfg.to_json())) == cfg
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 4, "dense_widths": [32, 16]}))
    loaded = load_config(path)
    assert loaded.seed == 4 and loaded.dense_widths == (32, 16) and loaded.cells == 4
    assert load_config(None) == cfg


def test_fingerprint_tracks_values():
    a = RunConfig()
    assert a.fingerprint == RunConfig().fingerprint
    assert a.fingerprint != a.replace(seed=1).fingerprint
    assert len(a.fingerprint) == 16


@pytest.mark.parametrize("doc,exc,msg", [
    ({"sede": 1}, ValueError, "unknown config keys: sede"),
    ({"cells": True}, TypeError, "must be an integer"),
    ({"cells": 2.5}, TypeError, "must be an integer"),
    ({"lr_max": "fast"}, TypeError, "must be a number"),
    ({"figures": 1}, TypeError, "true/false"),
    ({"dense_widths": [8, "x"]}, TypeError, "list of integers"),
    ({"folds": [5]}, ValueError, "outside 0..4"),
    ({"search_fraction": 1.0}, ValueError, "search_fraction"),
    ({"n_folds": 1}, ValueError, "n_folds"),
    ({"cells": 0}, ValueError, "cell count"),
])
def test_config_rejects_bad_documents(doc, exc, msg):
    with pytest.raises(exc, match=msg):
        from_dict(doc)


def test_invalid_json_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{cells: 3")
    with pytest.raises(ValueError, match="invalid JSON"):
        load_config(path)


# -- dataset commands --------------------------------------------------------
def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run_cli("dataset", "synth", "--n", 16, "--speakers", 5, "--seed", 9, "--out", tmp_path / name) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert len(load_container(tmp_path / "a")) == 16


def test_synth_rejects_unbalanced_count(tmp_path, capsys):
    assert run_cli("dataset", "synth", "--n", 3, "--out", tmp_path / "d") == 1
    assert "error:" in capsys.readouterr().err
    assert not list(tmp_path.iterdir())


def test_prepare_on_empty_dir_writes_nothing(tmp_path, capsys):
    (tmp_path / "wav").mkdir()
    (tmp_path / "labels.csv").write_text("a.wav,anger,s1\n")
    out = tmp_path / "d.serc"
    assert run_cli("dataset", "prepare", "--wav-dir", tmp_path / "wav", "--labels-csv", tmp_path / "labels.csv",
                   "--out", out) == 1
    assert "no .wav files" in capsys.readouterr().err
    assert not out.exists() and not (tmp_path / "d.serc.partial").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dartser", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "search" in proc.stdout


# -- search, train, eval, report ----------------------------------------------
@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert run_cli("dataset", "synth", "--n", 40, "--speakers", 5, "--seed", 3, "--out", root / "d.serc") == 0
    assert run_cli("search", "--config", root / "cfg.json", "--data", root / "d.serc", "--out-dir", root / "s1") == 0
    assert run_cli("train", "--config", root / "cfg.json", "--data", root / "d.serc", "--out-dir", root / "t1",
                   "--baseline", "cnn") == 0
    return root


def test_search_writes_one_genotype_per_fold(workspace):
    run = json.loads((workspace / "s1" / "run.json").read_text())
    assert run["reduction_indices"] == [1, 2]
    assert [r["fold"] for r in run["results"]] == [0, 1, 2, 3, 4]
    for k in range(5):
        fold = workspace / "s1" / f"fold_{k}"
        genotype = json.loads((fold / "genotype.json").read_text())
        assert genotype == run["results"][k]["genotype"]
        snapshots = (fold / "alphas.jsonl").read_text().splitlines()
        assert len(snapshots) == 3  # before epoch 0 and after each of the 2 epochs
        assert len((fold / "metrics.jsonl").read_text().splitlines()) == 4


def test_search_genotypes_are_reproducible_per_fold(workspace):
    # a rerun restricted to some folds reproduces those folds byte for byte
    out = workspace / "s2"
    assert run_cli("search", "--config", workspace / "cfg.json", "--data", workspace / "d.serc", "--out-dir", out,
                   "--folds", 0, 3) == 0
    for k in (0, 3):
        name = f"fold_{k}/genotype.json"
        assert (out / name).read_bytes() == (workspace / "s1" / name).read_bytes()
    assert not (out / "fold_1").exists()


def test_train_report_means_are_fold_means(workspace):
    report = json.loads((workspace / "t1" / "report.json").read_text())
    rows = report["folds"]
    assert len(rows) == 5
    for key in ("loss", "wa", "ua"):
        values = [r[key] for r in rows]
        assert report["mean"][key] == pytest.approx(sum(values) / 5, abs=1e-12)
        mean = sum(values) / 5
        assert report["std"][key] == pytest.approx((sum((v - mean) ** 2 for v in values) / 5) ** 0.5, abs=1e-12)


def test_eval_reproduces_stored_metrics(workspace, capsys):
    for k in (0, 4):
        capsys.readouterr()
        assert run_cli("eval", "--checkpoint", workspace / "t1" / f"fold_{k}" / "checkpoint.bin",
                       "--data", workspace / "d.serc") == 0
        lines = list(csv.reader(capsys.readouterr().out.splitlines()))
        assert lines[0] == ["fold", "source", "loss", "wa", "ua"]
        recomputed, stored = np.array(lines[1][2:], float), np.array(lines[2][2:], float)
        assert np.max(np.abs(recomputed - stored)) <= 1e-6


def test_eval_rejects_other_data(workspace, tmp_path, capsys):
    other = tmp_path / "other.serc"
    assert run_cli("dataset", "synth", "--n", 40, "--speakers", 5, "--seed", 4, "--out", other) == 0
    assert run_cli("eval", "--checkpoint", workspace / "t1" / "fold_0" / "checkpoint.bin", "--data", other) == 1
    assert "fingerprint mismatch" in capsys.readouterr().err


def test_train_from_search_run(workspace):
    out = workspace / "t2"
    assert run_cli("train", "--config", workspace / "cfg.json", "--data", workspace / "d.serc", "--out-dir", out,
                   "--genotype", workspace / "s1", "--folds", 1, "--epochs", 1) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["model"] == "darts"
    assert report["folds"][0]["genotype"] == json.loads((workspace / "s1" / "fold_1" / "genotype.json").read_text())
    assert len((out / "fold_1" / "metrics.jsonl").read_text().splitlines()) == 2  # 1 epoch + test


def test_train_with_missing_genotype_fails_before_writing(workspace, tmp_path, capsys):
    out = tmp_path / "t"
    assert run_cli("train", "--config", workspace / "cfg.json", "--data", workspace / "d.serc", "--out-dir", out,
                   "--genotype", tmp_path / "nowhere.json") == 1
    assert "no genotype for fold 0" in capsys.readouterr().err
    assert not out.exists()


def test_fold_failure_names_the_fold(workspace, tmp_path, monkeypatch, capsys):
    calls = []

    def failing(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise FloatingPointError("non-finite gradient")
        return []

    monkeypatch.setattr(experiment, "run_training", failing)
    code = run_cli("train", "--config", workspace / "cfg.json", "--data", workspace / "d.serc",
                   "--out-dir", tmp_path / "t", "--baseline", "cnn", "--folds", 2, 4)
    assert code == 2
    assert "fold 4: FloatingPointError: non-finite gradient" in capsys.readouterr().err


def test_report_writes_csv_and_figures(workspace, capsys):
    assert run_cli("report", workspace / "t1") == 0
    printed = capsys.readouterr().out
    summary = (workspace / "t1" / "summary.csv").read_text()
    assert printed == summary
    rows = list(csv.DictReader(summary.splitlines()))
    report = json.loads((workspace / "t1" / "report.json").read_text())
    mean_row = next(r for r in rows if r["fold"] == "mean")
    assert float(mean_row["test_wa"]) == pytest.approx(report["mean"]["wa"], abs=1e-6)
    pngs = [workspace / "t1" / "folds.png"] + [workspace / "t1" / f"fold_{k}" / "curves.png" for k in range(5)]
    assert all(p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for p in pngs)

    assert run_cli("report", workspace / "s1") == 0
    fold = workspace / "s1" / "fold_0"
    assert all((fold / name).read_bytes()[:4] == b"\x89PNG" for name in ("curves.png", "alphas.png", "entropy.png"))


def test_genotype_export_dot(workspace, tmp_path, capsys):
    src = workspace / "s1" / "fold_2" / "genotype.json"
    assert run_cli("genotype", "export-dot", "--genotype", src) == 0
    printed = capsys.readouterr().out
    assert printed.startswith("digraph")
    assert printed == (workspace / "s1" / "fold_2" / "genotype.dot").read_text()
    bad = tmp_path / "bad.json"
    bad.write_text('{"normal": []}')
    assert run_cli("genotype", "export-dot", "--genotype", bad) == 1
