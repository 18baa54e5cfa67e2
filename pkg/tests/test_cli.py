import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from pimetal.cli import main
from pimetal.graphs import TaskDataset, knn_graph, save_suite

TINY = {
    "seed": 2,
    "metatrain": {"n_tasks": 3, "n_nodes": [10, 14], "k_neighbors": 3, "split_k": 3,
                  "pde": {"grid_n": 16, "n_frames": 7, "fourier_cutoff": 1}},
    "metatest": {"n_tasks": 2, "n_nodes": 12, "k_neighbors": 3, "split_k": 3,
                 "pde": {"grid_n": 16, "n_frames": 7, "fourier_cutoff": 1, "lam": 0.8, "diff_coeff": 0.1}},
    "model": {"sdm_hidden": 3, "tdm_hidden": 3, "rgn_hidden": 3},
    "meta": {"epochs": 3, "adapt_epochs": 2},
    "evaluate": {"shots": [3, 5]},
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.log"}


def test_fdm_examples(capsys):
    assert run("fdm", "--offsets", "-1,0,1", "--order", "2") == 0
    assert capsys.readouterr().out == "1 -2 1\n"
    assert run("fdm", "--offsets", "0,1", "--order", "1") == 0
    assert capsys.readouterr().out == "-1 1\n"
    assert run("fdm", "--offsets", "-1,0,1", "--order", "1") == 0
    assert capsys.readouterr().out == "-0.5 0 0.5\n"
    assert run("fdm", "--offsets", "-1,0,1/2", "--order", "1") == 0
    assert capsys.readouterr().out == "-1/3 -1 4/3\n"


def test_fdm_errors_exit_nonzero(capsys):
    assert run("fdm", "--offsets", "0,0", "--order", "1") == 2
    assert "distinct" in capsys.readouterr().err
    assert run("fdm", "--offsets", "0,1", "--order", "1", "--h", "0") == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "pimetal", "fdm", "--offsets", "-2,-1,0", "--order", "1"],
                         capture_output=True, text=True, check=True)
    assert out.stdout == "0.5 -2 1.5\n"


def test_generate_desk_scale_quickly(tmp_path, capsys):
    t0 = time.perf_counter()
    assert run("generate", "--tasks", "3", "--nodes", "20", "--out", tmp_path / "s") == 0
    assert time.perf_counter() - t0 < 10
    manifest = json.loads((tmp_path / "s" / "metatrain" / "manifest.json").read_text())
    assert manifest["n_tasks"] == 3
    assert not (tmp_path / "s.incomplete").exists()
    assert (tmp_path / "s" / "timing.log").exists()


def test_generate_is_reproducible(tmp_path, tiny):
    assert run("generate", "--config", tiny, "--out", tmp_path / "a") == 0
    assert run("generate", "--config", tiny, "--out", tmp_path / "b") == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert run("generate", "--config", tiny, "--seed", "3", "--out", tmp_path / "c") == 0
    h = lambda d: json.loads((tmp_path / d / "metatrain" / "manifest.json").read_text())["manifest_hash"]  # noqa: E731
    assert h("a") == h("b") != h("c")


def test_refuses_foreign_directory(tmp_path, capsys):
    foreign = tmp_path / "mine"
    foreign.mkdir()
    (foreign / "notes.txt").write_text("keep me")
    assert run("generate", "--tasks", "1", "--nodes", "10", "--out", foreign) == 2
    assert (foreign / "notes.txt").read_text() == "keep me"
    assert "refusing" in capsys.readouterr().err


def test_failure_leaves_incomplete_directory(tmp_path, tiny, capsys):
    assert run("generate", "--config", tiny, "--out", tmp_path / "s") == 0
    # drop the derivative label columns so training fails after output staging began
    for labels in (tmp_path / "s" / "metatrain").rglob("frames.csv"):
        text = labels.read_text().splitlines()
        labels.write_text("\n".join(",".join(r.split(",")[:3]) for r in text) + "\n")
    assert run("train", "--variant", "modular", "--config", tiny, "--suite", tmp_path / "s" / "metatrain",
               "--out", tmp_path / "r") == 2
    assert not (tmp_path / "r").exists()
    assert (tmp_path / "r.incomplete").is_dir()
    assert "auxiliary" in capsys.readouterr().err


def test_scratch_refuses_meta_flags(tmp_path, tiny, capsys):
    assert run("train", "--variant", "scratch", "--beta", "0.1", "--config", tiny, "--out", tmp_path / "r") == 2
    assert "--beta" in capsys.readouterr().err
    assert run("train", "--variant", "scratch", "--suite", tmp_path, "--config", tiny, "--out", tmp_path / "r") == 2
    assert run("train", "--variant", "modular", "--config", tiny, "--out", tmp_path / "r") == 2
    assert "--suite" in capsys.readouterr().err


def test_rgn_cannot_meta_train(tmp_path, tiny, capsys):
    assert run("generate", "--config", tiny, "--out", tmp_path / "s") == 0
    assert run("train", "--variant", "maml", "--model", "rgn", "--config", tiny,
               "--suite", tmp_path / "s" / "metatrain", "--out", tmp_path / "r") == 2
    assert "padgn" in capsys.readouterr().err


def test_maml_beta_zero_matches_modular_first_epoch(tmp_path, tiny):
    assert run("generate", "--config", tiny, "--out", tmp_path / "s") == 0
    suite = tmp_path / "s" / "metatrain"
    for variant in ("modular", "maml"):
        assert run("train", "--variant", variant, "--beta", "0", "--epochs", "1", "--config", tiny,
                   "--suite", suite, "--out", tmp_path / variant) == 0
    rows = {v: list(csv.DictReader((tmp_path / v / "losses.csv").open())) for v in ("modular", "maml")}
    assert len(rows["modular"]) == len(rows["maml"]) == 1
    for key, val in rows["modular"][0].items():
        if key == "task_id":
            assert rows["maml"][0][key] == val
        else:
            assert abs(float(val) - float(rows["maml"][0][key])) < 1e-10
    meta = json.loads((tmp_path / "maml" / "metadata.json").read_text())
    assert meta["first_order_maml"] is True and meta["outer_update"] == "adam"
    assert meta["suite_manifest_hash"] == json.loads((suite / "manifest.json").read_text())["manifest_hash"]


def _constant_suite(path: Path, n_extra: int = 0) -> None:
    rng = np.random.default_rng(0)
    tasks = []
    for i in range(3):
        coords = rng.uniform(0, 6, size=(9, 2))
        extra = np.zeros((8, 9, n_extra)) if n_extra else None
        tasks.append(TaskDataset(knn_graph(coords, 3), np.full((8, 9), 0.1 * i), np.zeros((8, 9, 4)), 0.01, 5,
                                 extra=extra, task_id=f"const-{i}"))
    save_suite(tasks, path)


def test_evaluate_zero_head_on_constant_tasks(tmp_path, tiny, capsys):
    _constant_suite(tmp_path / "const")
    cfg = yaml.safe_load(tiny.read_text())
    cfg["meta"]["adapt_epochs"] = 0
    zero = tmp_path / "zero.yaml"
    zero.write_text(yaml.safe_dump(cfg))
    assert run("train", "--variant", "scratch", "--config", zero, "--out", tmp_path / "run") == 0
    assert run("evaluate", "--run", tmp_path / "run", "--suite", tmp_path / "const", "--shots", "5",
               "--out", tmp_path / "ev") == 0
    summary = list(csv.DictReader((tmp_path / "ev" / "summary.csv").open()))
    assert [float(r["mean_test_mse"]) for r in summary] == [0.0]
    assert "PA-DGN (train from scratch)" in capsys.readouterr().out


def test_evaluate_rows_and_means(tmp_path, tiny):
    assert run("generate", "--config", tiny, "--out", tmp_path / "s") == 0
    assert run("train", "--variant", "scratch", "--model", "rgn", "--config", tiny, "--out", tmp_path / "a") == 0
    assert run("train", "--variant", "modular", "--config", tiny, "--suite", tmp_path / "s" / "metatrain",
               "--out", tmp_path / "b") == 0
    assert run("evaluate", "--run", tmp_path / "a", "--run", tmp_path / "b", "--suite", tmp_path / "s" / "metatest",
               "--shots", "3,5", "--out", tmp_path / "ev") == 0
    lines = (tmp_path / "ev" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "task_id,shots,method,test_mse"
    rows = list(csv.DictReader(lines))
    assert len(rows) == 2 * 2 * 2  # methods x shots x tasks
    summary = list(csv.DictReader((tmp_path / "ev" / "summary.csv").open()))
    assert len(summary) == 4
    for s in summary:
        vals = [float(r["test_mse"]) for r in rows if r["method"] == s["method"] and r["shots"] == s["shots"]]
        assert float(s["mean_test_mse"]) == pytest.approx(sum(vals) / len(vals), rel=1e-15)
    assert all(len(r["test_mse"].replace("-", "").replace(".", "").split("e")[0]) >= 15 for r in rows)


def test_evaluate_names_feature_mismatch(tmp_path, tiny, capsys):
    _constant_suite(tmp_path / "const", n_extra=2)
    assert run("train", "--variant", "scratch", "--config", tiny, "--out", tmp_path / "run") == 0
    assert run("evaluate", "--run", tmp_path / "run", "--suite", tmp_path / "const", "--out", tmp_path / "ev") == 2
    assert "n_extra" in capsys.readouterr().err


def test_evaluate_rejects_impossible_shots(tmp_path, tiny, capsys):
    _constant_suite(tmp_path / "const")
    assert run("train", "--variant", "scratch", "--config", tiny, "--out", tmp_path / "run") == 0
    assert run("evaluate", "--run", tmp_path / "run", "--suite", tmp_path / "const", "--shots", "8",
               "--out", tmp_path / "ev") == 2
    assert "shots=8" in capsys.readouterr().err


def test_pipeline_bytes_independent_of_threads(tmp_path, tiny, capsys):
    assert run("pipeline", "--config", tiny, "--threads", "1", "--out", tmp_path / "p1") == 0
    assert run("pipeline", "--config", tiny, "--threads", "3", "--out", tmp_path / "p3") == 0
    one, three = tree_bytes(tmp_path / "p1"), tree_bytes(tmp_path / "p3")
    assert one == three
    assert any(k.endswith("phi.ckpt") for k in one) and "metrics.csv" in one
    summary = list(csv.DictReader((tmp_path / "p1" / "summary.csv").open()))
    assert len(summary) == 6 * 2
    assert {r["shots"] for r in summary} == {"3", "5"}


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--model", "rgn", "--nodes", "10") == 0
    out = capsys.readouterr().out
    assert "rgn" in out and "FAIL" not in out


def test_unknown_config_key_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("meta:\n  epoch: 3\n")
    assert run("generate", "--config", bad, "--out", tmp_path / "s") == 2
    assert "epoch" in capsys.readouterr().err
