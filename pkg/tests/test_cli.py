import json

import numpy as np
import pytest
import yaml
from PIL import Image

from clsa.cli import run

TINY_CONFIG = {
    "batch_size": 8,
    "bank_size": 64,
    "arch": {"width": 8, "depths": [1, 1], "hidden_dim": 16, "embed_dim": 8, "gn_groups": 4},
    "weak": {"crop_size": 16},
    "strong": {"crop_sizes": [8]},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_CONFIG))
    return path


@pytest.fixture
def trained(tmp_path, config_file):
    out = tmp_path / "run"
    code = run(["pretrain", "--config", str(config_file), "--epochs", "1", "--data", "synth:4x8:0",
                "--out", str(out)])
    assert code == 0
    return out


def test_pretrain_zero_epochs(tmp_path, config_file):
    out = tmp_path / "zero"
    assert run(["pretrain", "--config", str(config_file), "--epochs", "0", "--out", str(out),
                "--data", "synth:4x8"]) == 0
    assert (out / "checkpoint_epoch0000.pt").is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 0 and manifest["finished"]
    assert (out / "config.yaml").is_file()
    assert not [l for l in (out / "metrics.jsonl").read_text().splitlines() if '"step"' in l]


def test_run_directory_contents(trained):
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["command"] == "pretrain"
    assert manifest["seed"] == 0
    assert manifest["outputs"]["checkpoints"] == ["checkpoint_epoch0001.pt"]
    snapshot = yaml.safe_load((trained / "config.yaml").read_text())
    assert snapshot == manifest["config"]
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    assert sum(json.loads(l)["type"] == "step" for l in lines) == 4


def test_snapshot_reproduces_metrics(trained, tmp_path):
    again = tmp_path / "again"
    assert run(["pretrain", "--config", str(trained / "config.yaml"), "--data", "synth:4x8:0",
                "--out", str(again)]) == 0

    def losses(path):
        return [json.loads(l)["loss"] for l in (path / "metrics.jsonl").read_text().splitlines()
                if json.loads(l)["type"] == "step"]

    assert losses(again) == losses(trained)


def test_set_and_flag_precedence(tmp_path, config_file):
    out = tmp_path / "p"
    assert run(["pretrain", "--config", str(config_file), "--set", "epochs=3", "--epochs", "0",
                "--set", "loss.beta=0.5", "--seed", "4", "--out", str(out), "--data", "synth:4x8"]) == 0
    cfg = yaml.safe_load((out / "config.yaml").read_text())
    assert cfg["epochs"] == 0 and cfg["loss"]["beta"] == 0.5 and cfg["seed"] == 4


def test_eval_knn(trained, tmp_path, capsys):
    out = tmp_path / "knn"
    code = run(["eval-knn", "--checkpoint", str(trained / "checkpoint_epoch0001.pt"), "--data", "synth:4x8:0",
                "--test-data", "synth:4x4:1", "--k", "3", "--strong-crop", "16", "--out", str(out), "--plots"])
    assert code == 0
    record = json.loads((out / "metrics.jsonl").read_text().splitlines()[-1])
    assert 0 <= record["center_crop"] <= 1 and 0 <= record["strong"] <= 1
    assert (out / "knn_summary.png").is_file()
    assert "knn k=3 center_crop" in capsys.readouterr().out


def test_eval_linear(trained, tmp_path):
    out = tmp_path / "lin"
    assert run(["eval-linear", "--checkpoint", str(trained / "checkpoint_epoch0001.pt"), "--data", "synth:4x8:0",
                "--test-data", "synth:4x4:1", "--probe-epochs", "2", "--out", str(out)]) == 0
    record = json.loads((out / "metrics.jsonl").read_text().splitlines()[-1])
    assert record["type"] == "linear" and 0 <= record["accuracy"] <= 1


def test_diagnose_with_and_without_checkpoint(trained, tmp_path, config_file):
    out = tmp_path / "diag"
    assert run(["diagnose", "--checkpoint", str(trained / "checkpoint_epoch0001.pt"), "--data", "synth:4x8:0",
                "--n-samples", "16", "--out", str(out), "--plots"]) == 0
    assert (out / "diagnostics.png").is_file()
    out2 = tmp_path / "diag_init"
    assert run(["diagnose", "--config", str(config_file), "--data", "synth:4x8:0", "--n-samples", "16",
                "--out", str(out2)]) == 0
    record = json.loads((out2 / "metrics.jsonl").read_text().splitlines()[-1])
    assert record["n_samples"] == 16 and 0 <= record["ks_pos"] <= 1


def test_missing_checkpoint(tmp_path, capsys):
    code = run(["eval-knn", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "o")])
    assert code == 1
    err = capsys.readouterr().err
    assert "checkpoint not found" in err
    assert len(err.strip().splitlines()) == 1


def test_preview_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["preview-augment", "--seed", "3", "--out", str(a), "--data", "synth:4x8"]) == 0
    assert run(["preview-augment", "--seed", "3", "--out", str(b), "--data", "synth:4x8"]) == 0
    img_a = np.asarray(Image.open(a / "preview.png"))
    assert np.array_equal(img_a, np.asarray(Image.open(b / "preview.png")))
    assert img_a.ndim == 3


@pytest.mark.parametrize("argv", [["pretrain", "--bogus"], ["frobnicate"], []])
def test_usage_errors_exit_2(argv, capsys):
    assert run(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_invalid_config_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"loss": {"temprature": 0.1}}))
    assert run(["pretrain", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "loss.temprature" in capsys.readouterr().err


def test_invalid_value_names_field(tmp_path, capsys):
    assert run(["pretrain", "--set", "batch_size=abc", "--out", str(tmp_path / "o")]) == 1
    assert "batch_size" in capsys.readouterr().err


def test_missing_data_folder(tmp_path, capsys):
    assert run(["pretrain", "--epochs", "0", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
    assert "nope" in capsys.readouterr().err
