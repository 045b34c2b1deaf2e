"""Tests for the command-line interface."""

import pytest
from click.testing import CliRunner

from probact import __version__
from probact.cli import main

SMALL_CONFIG = """\
version: "1"
name: cli
model: mlp
activation:
  kind: {activation}
dataset:
  kind: blobs
  n_train: 128
  n_test: 64
  resolution: 1
training:
  epochs: 1
  batch_size: 64
service:
  log_level: warning
"""


@pytest.fixture
def runner():
    return CliRunner()


def write_config(tmp_path, activation="relu"):
    path = tmp_path / f"{activation}.yaml"
    path.write_text(SMALL_CONFIG.format(activation=activation))
    return path


def train(runner, tmp_path, name, *args, activation="relu"):
    out = tmp_path / name
    result = runner.invoke(
        main, ["train", "-c", str(write_config(tmp_path, activation)), "--out", str(out), *args]
    )
    assert result.exit_code == 0, result.output
    return out


class TestGroup:
    """Tests for the top-level group."""

    def test_version(self, runner):
        """Test --version prints the package version."""
        result = runner.invoke(main, ["--version"])
        assert result.exit_code == 0
        assert __version__ in result.output

    def test_help_lists_commands(self, runner):
        """Test every command is registered."""
        result = runner.invoke(main, ["--help"])
        for command in ("train", "eval", "swap", "reduced-suite", "overfit-suite", "export"):
            assert command in result.output


class TestInitValidate:
    """Tests for init and validate."""

    def test_init_then_validate(self, runner, tmp_path):
        """Test the generated example configuration validates."""
        path = tmp_path / "config.yaml"
        result = runner.invoke(main, ["init", "-o", str(path)])
        assert result.exit_code == 0
        assert "Created example configuration" in result.output

        result = runner.invoke(main, ["validate", "-c", str(path)])
        assert result.exit_code == 0, result.output
        assert "Configuration is valid" in result.output
        assert "probact-bounded-2-5" in result.output

    def test_init_keeps_existing(self, runner, tmp_path):
        """Test declining the prompt leaves the file alone."""
        path = tmp_path / "config.yaml"
        path.write_text("name: mine\n")
        result = runner.invoke(main, ["init", "-o", str(path)], input="n\n")
        assert result.exit_code == 0
        assert path.read_text() == "name: mine\n"

    def test_validate_invalid(self, runner, tmp_path):
        """Test an invalid configuration exits with status 1."""
        path = tmp_path / "bad.yaml"
        path.write_text("eval_mode: mc\n")
        result = runner.invoke(main, ["validate", "-c", str(path)])
        assert result.exit_code == 1
        assert "Configuration error" in result.output


class TestTrain:
    """Tests for train."""

    def test_train(self, runner, tmp_path):
        """Test a run finishes and writes its directory."""
        out = train(runner, tmp_path, "run")
        assert (out / "checkpoint.npz").exists()
        assert (out / "config.json").exists()

    def test_flags_override_config(self, runner, tmp_path):
        """Test activation flags replace the configured activation."""
        result = runner.invoke(
            main,
            [
                "train",
                "-c",
                str(write_config(tmp_path)),
                "--out",
                str(tmp_path / "fixed"),
                "--activation",
                "probact:fixed",
                "--sigma",
                "0.5",
                "--seed",
                "3",
            ],
        )
        assert result.exit_code == 0, result.output
        assert "probact-fixed-0.5" in result.output

    def test_sigma_needs_probact(self, runner, tmp_path):
        """Test --sigma on a ReLU config is an error."""
        result = runner.invoke(
            main, ["train", "-c", str(write_config(tmp_path)), "--sigma", "0.5"]
        )
        assert result.exit_code == 1
        assert "Error:" in result.output

    def test_cifar_without_directory(self, runner, tmp_path, monkeypatch):
        """Test a CIFAR run without a dataset directory fails cleanly."""
        monkeypatch.delenv("PROBACT_DATASET_DIR", raising=False)
        path = tmp_path / "cifar.yaml"
        path.write_text("dataset:\n  kind: cifar10\n")
        result = runner.invoke(main, ["train", "-c", str(path), "--out", str(tmp_path / "c")])
        assert result.exit_code == 1
        assert "Error:" in result.output


class TestEvalSwap:
    """Tests for eval and swap."""

    def test_eval_repeats(self, runner, tmp_path):
        """Test eval reports every repeat and the mean."""
        out = train(runner, tmp_path, "run", activation="probact")
        result = runner.invoke(
            main,
            ["eval", "--checkpoint", str(out / "checkpoint.npz"), "--repeats", "2"],
        )
        assert result.exit_code == 0, result.output
        assert "repeat 1:" in result.output
        assert "Accuracy (stochastic, test)" in result.output

    def test_eval_mode_flag(self, runner, tmp_path):
        """Test --eval-mode overrides the checkpointed mode."""
        out = train(runner, tmp_path, "run", activation="probact")
        result = runner.invoke(
            main,
            ["eval", "--checkpoint", str(out / "checkpoint.npz"), "--eval-mode", "mc:4"],
        )
        assert result.exit_code == 0, result.output
        assert "Accuracy (mc:4, test)" in result.output

    def test_swap(self, runner, tmp_path):
        """Test swapping a ProbAct checkpoint writes a ReLU checkpoint."""
        out = train(runner, tmp_path, "run", activation="probact")
        target = tmp_path / "swapped.npz"
        result = runner.invoke(
            main, ["swap", "--checkpoint", str(out / "checkpoint.npz"), "--out", str(target)]
        )
        assert result.exit_code == 0, result.output
        assert target.exists()

    def test_swap_relu_fails(self, runner, tmp_path):
        """Test swapping a ReLU checkpoint is an error."""
        out = train(runner, tmp_path, "run")
        result = runner.invoke(
            main,
            ["swap", "--checkpoint", str(out / "checkpoint.npz"), "--out", str(tmp_path / "x")],
        )
        assert result.exit_code == 1
        assert "Error:" in result.output
        assert "not ProbAct" in result.output


class TestExport:
    """Tests for the export commands."""

    def test_sigma(self, runner, tmp_path):
        """Test the trajectory of a bounded run is exported."""
        out = train(runner, tmp_path, "run", activation="probact")
        target = tmp_path / "trajectory.csv"
        result = runner.invoke(
            main, ["export", "sigma", "--run-dir", str(out), "--out", str(target)]
        )
        assert result.exit_code == 0, result.output
        assert target.read_text().startswith("epoch,")

    def test_sigma_relu_fails(self, runner, tmp_path):
        """Test a ReLU run has no trajectory to export."""
        out = train(runner, tmp_path, "run")
        result = runner.invoke(main, ["export", "sigma", "--run-dir", str(out)])
        assert result.exit_code == 1
        assert "no trainable sigma" in result.output

    def test_khist(self, runner, tmp_path):
        """Test one histogram per ProbAct site."""
        out = train(runner, tmp_path, "run", activation="probact")
        result = runner.invoke(
            main,
            [
                "export",
                "khist",
                "--checkpoint",
                str(out / "checkpoint.npz"),
                "--bins",
                "8",
                "--out-dir",
                str(tmp_path / "hist"),
            ],
        )
        assert result.exit_code == 0, result.output
        assert "Exported 2 histograms" in result.output
        assert (tmp_path / "hist" / "k_hist_layer1.csv").exists()

    def test_timing(self, runner, tmp_path):
        """Test the timing table over a ReLU and a ProbAct run."""
        relu = train(runner, tmp_path, "relu")
        probact = train(runner, tmp_path, "probact", activation="probact")
        target = tmp_path / "timing.csv"
        result = runner.invoke(
            main, ["export", "timing", str(relu), str(probact), "--out", str(target)]
        )
        assert result.exit_code == 0, result.output
        lines = target.read_text().splitlines()
        assert lines[1].startswith("relu,")
        assert lines[2].startswith("probact-bounded-2-5,")
