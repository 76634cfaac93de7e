"""
Tests for the dcbox command line
"""

import json

import pandas as pd
import pytest

from dcbox.cli import cli
from dcbox.presets import preset_names


CONFIG = """\
dataset = synthetic
n_clusters = 3
synth_n_per_cluster = 20
synth_dim = 4
synth_nonlinearity = none
hidden_dims = 8
latent_dim = 3
batch_norm = false
batch_size = 16
pretrain_epochs = 2
finetune_epochs = 2
kmeans_restarts = 2
update_frequency_p = 2
target_refresh_interval = 2
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(CONFIG + f"output_dir = {tmp_path / 'out'}\n")
    return path


def test_run_writes_report(config_file, tmp_path, capsys):
    """run prints the scores and leaves report.json behind"""
    assert cli(["--log-level", "warning", "run", "--config", str(config_file)]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert "nmi" in report
    assert "nmi=" in capsys.readouterr().out


def test_output_dir_override(config_file, tmp_path):
    """--output-dir wins over the configured directory"""
    assert cli(["run", "--config", str(config_file), "--output-dir", str(tmp_path / "elsewhere")]) == 0
    assert (tmp_path / "elsewhere" / "report.json").is_file()
    assert not (tmp_path / "out").exists()


def test_staged_commands(config_file, tmp_path):
    """pretrain, finetune, cluster and export-embeddings chain through checkpoints"""
    out = tmp_path / "out"
    assert cli(["pretrain", "--config", str(config_file)]) == 0
    assert (out / "pretrained.dcae").is_file()

    assert cli(["finetune", "--config", str(config_file), "--checkpoint", str(out / "pretrained.dcae")]) == 0
    assert (out / "checkpoint.dcae").is_file()

    assert cli(["cluster", "--config", str(config_file), "--checkpoint", str(out / "checkpoint.dcae")]) == 0
    assignments = pd.read_csv(out / "assignments.csv")
    assert list(assignments.columns) == ["sample_id", "in_training_cluster", "final_cluster"]
    assert len(assignments) == 60

    assert cli(["export-embeddings", "--config", str(config_file), "--checkpoint", str(out / "checkpoint.dcae")]) == 0
    embeddings = pd.read_csv(out / "embeddings.csv")
    assert len(embeddings) == 60
    assert list(embeddings.columns) == ["sample_id", "assigned_cluster", "z_0", "z_1", "z_2"]
    assert list(pd.read_csv(out / "pca.csv").columns) == ["sample_id", "pc_0", "pc_1"]


def test_cluster_from_pretrained_checkpoint(config_file, tmp_path):
    """A checkpoint without centroids is clustered with k-means"""
    out = tmp_path / "out"
    assert cli(["pretrain", "--config", str(config_file)]) == 0
    assert cli(["cluster", "--config", str(config_file), "--checkpoint", str(out / "pretrained.dcae")]) == 0
    assert len(pd.read_csv(out / "assignments.csv")) == 60


def test_evaluate_identical_labels(tmp_path, capsys):
    """Identical label files score perfectly"""
    labels = tmp_path / "labels.csv"
    labels.write_text("label\n0\n0\n1\n1\n2\n")
    assert cli(["evaluate", "--pred", str(labels), "--truth", str(labels)]) == 0
    assert capsys.readouterr().out.strip() == "nmi=1.0000, acc=1.0000"


def test_evaluate_length_mismatch(tmp_path, capsys):
    """Label files of different length fail cleanly"""
    (tmp_path / "a.csv").write_text("0\n1\n")
    (tmp_path / "b.csv").write_text("0\n1\n1\n")
    assert cli(["evaluate", "--pred", str(tmp_path / "a.csv"), "--truth", str(tmp_path / "b.csv")]) == 1
    assert "error:" in capsys.readouterr().err


def test_missing_config(tmp_path, capsys):
    """A missing config file exits non-zero and names the path"""
    missing = tmp_path / "absent.cfg"
    assert cli(["run", "--config", str(missing)]) != 0
    assert "absent.cfg" in capsys.readouterr().err


def test_invalid_config(tmp_path, capsys):
    """Config errors are reported with their line"""
    path = tmp_path / "bad.cfg"
    path.write_text("dataset = synthetic\nn_clusters = 3\nalpha_constant = 2\n")
    assert cli(["run", "--config", str(path)]) == 1
    assert "line 3" in capsys.readouterr().err


@pytest.mark.parametrize("command", ["run", "pretrain"])
def test_unordered_feature_layers(tmp_path, capsys, command):
    """Feature layers out of order are a config error, not a traceback"""
    path = tmp_path / "layers.cfg"
    path.write_text(CONFIG + "feature_mode = several_layers\nfeature_layers = 3, 1\n")
    assert cli([command, "--config", str(path), "--output-dir", str(tmp_path / "out")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "feature_layers" in err


@pytest.mark.parametrize("argv", [["frobnicate"], ["run"], ["run", "--config", "x.cfg", "--bogus"], []])
def test_usage_errors(argv):
    """Unknown commands, missing arguments and no command at all exit with 2"""
    assert cli(argv) == 2


def test_presets_listing(capsys):
    """presets prints one name per line"""
    assert cli(["presets"]) == 0
    assert capsys.readouterr().out.split() == preset_names()
