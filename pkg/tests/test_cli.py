"""End-to-end CLI exercises on a miniature configuration."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from kindiff.cli import main
from kindiff.config import config_from_dict, config_to_dict, desk_config, save_config


@pytest.fixture(scope="module")
def mini_cfg_path(tmp_path_factory):
    doc = config_to_dict(desk_config())
    doc["group_dims"] = [2] * 6
    doc["denoiser"] = {"embed_dim": 16, "n_layers": 1, "n_heads": 2, "mlp_ratio": 2}
    doc["dataset"]["n"] = 80
    doc["schedule"]["timesteps"] = 40
    doc["schedule"]["inference_steps"] = 5
    doc["guidance"]["null_samples"] = 40
    doc["training"].update(
        {"batch_size": 32, "epochs": 2, "min_epochs": 1, "patience": 10}
    )
    doc["eval"].update({"samples_per_family": 4, "n_families": 4, "embed_dim": 8})
    cfg = config_from_dict(doc)
    path = tmp_path_factory.mktemp("cfg") / "mini.json"
    save_config(cfg, path)
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, mini_cfg_path):
    out = tmp_path_factory.mktemp("ws")
    rc = main(["gen-data", "--config", str(mini_cfg_path), "--out", str(out)])
    assert rc == 0
    rc = main(
        [
            "train",
            "--config", str(mini_cfg_path),
            "--dataset", str(out / "dataset.bin"),
            "--task", "child",
            "--out", str(out),
        ]
    )
    assert rc == 0
    return out


def test_gen_data_deterministic(tmp_path, mini_cfg_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["gen-data", "--config", str(mini_cfg_path), "--out", str(a)]) == 0
    assert main(["gen-data", "--config", str(mini_cfg_path), "--out", str(b)]) == 0
    assert (a / "dataset.bin").read_bytes() == (b / "dataset.bin").read_bytes()


def test_gen_data_invalid_size_exits_2(tmp_path, mini_cfg_path):
    doc = json.loads(Path(mini_cfg_path).read_text())
    doc["dataset"]["n"] = 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    rc = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert not (tmp_path / "o" / "dataset.bin").exists()


def test_unknown_config_key_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": True}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_train_outputs(workspace):
    assert (workspace / "checkpoint.bin").exists()
    with open(workspace / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and set(rows[0]) == {"step", "loss", "lr", "wall_time"}
    with open(workspace / "epochs.csv") as fh:
        erows = list(csv.DictReader(fh))
    assert len(erows) == 2


def test_train_reproducible_modulo_walltime(tmp_path, mini_cfg_path, workspace):
    out2 = tmp_path / "rerun"
    rc = main(
        [
            "train",
            "--config", str(mini_cfg_path),
            "--dataset", str(workspace / "dataset.bin"),
            "--task", "child",
            "--out", str(out2),
        ]
    )
    assert rc == 0
    assert (workspace / "checkpoint.bin").read_bytes() == (
        out2 / "checkpoint.bin"
    ).read_bytes()

    def strip_walltime(path):
        with open(path) as fh:
            return [
                {k: v for k, v in row.items() if k != "wall_time"}
                for row in csv.DictReader(fh)
            ]

    assert strip_walltime(workspace / "loss.csv") == strip_walltime(out2 / "loss.csv")


def test_sample_outputs_and_determinism(tmp_path, workspace):
    out1 = tmp_path / "s1"
    out2 = tmp_path / "s2"
    for out in (out1, out2):
        rc = main(
            [
                "sample",
                "--checkpoint", str(workspace / "checkpoint.bin"),
                "--dataset", str(workspace / "dataset.bin"),
                "--index", "0",
                "--n", "5",
                "--age", "0.3",
                "--gender", "1",
                "--seed", "17",
                "--out", str(out),
            ]
        )
        assert rc == 0
    assert (out1 / "samples.bin").read_bytes() == (out2 / "samples.bin").read_bytes()
    with open(out1 / "readouts.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5


def test_eval_report(tmp_path, workspace):
    out = tmp_path / "ev"
    rc = main(
        [
            "eval",
            "--checkpoint", str(workspace / "checkpoint.bin"),
            "--dataset", str(workspace / "dataset.bin"),
            "--out", str(out),
        ]
    )
    assert rc == 0
    report = json.loads((out / "metrics.json").read_text())
    assert -1.0 <= report["ds"] <= 1.0
    assert 0.0 <= report["auc"] <= 1.0
    assert 0.0 <= report["gender_acc"] <= 1.0
    assert report["config_hash"]
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1


def test_eval_task_mismatch_exits_2(tmp_path, workspace):
    rc = main(
        [
            "eval",
            "--checkpoint", str(workspace / "checkpoint.bin"),
            "--dataset", str(workspace / "dataset.bin"),
            "--task", "partner-mother",
            "--out", str(tmp_path / "x"),
        ]
    )
    assert rc == 2


def test_selftest_command():
    assert main(["selftest", "--out", "out"]) == 0


def test_missing_config_file_exits_2(tmp_path):
    rc = main(
        ["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]
    )
    assert rc == 2
