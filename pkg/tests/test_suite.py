"""Tests for the experiment suites."""

import csv

import pytest

from probact.config import parse_activation
from probact.suite import run_overfitting_suite, run_reduced_data_suite


def outcomes(result):
    return [
        (r.activation, r.fraction, r.dropout, r.repeat, r.train_accuracy, r.test_accuracy)
        for r in result.runs
    ]


@pytest.fixture
def base(make_config):
    return make_config(name="suite", training={"epochs": 1, "batch_size": 64})


class TestReducedDataSuite:
    """Tests for run_reduced_data_suite."""

    def test_cells_and_seeds(self, base, tmp_path):
        """Test every (activation, fraction) cell runs once per repeat with its own seeds."""
        result = run_reduced_data_suite(base, repeats=2, out_dir=tmp_path / "reduced")
        assert len(result.runs) == 8
        assert len(result.cells) == 4
        assert {c.activation for c in result.cells} == {"relu", "probact-bounded-2-5"}
        assert all(c.repeats == 2 for c in result.cells)

        relu_half = [r for r in result.runs if r.activation == "relu" and r.fraction == 0.5]
        assert sorted(r.subset_seed for r in relu_half) == [0, 1]
        assert sorted(r.noise_seed for r in relu_half) == [0, 1]

        with (tmp_path / "reduced" / "runs.csv").open(newline="") as f:
            assert len(list(csv.DictReader(f))) == 8
        with (tmp_path / "reduced" / "summary.csv").open(newline="") as f:
            rows = list(csv.DictReader(f))
        assert {float(r["fraction"]) for r in rows} == {0.5, 0.25}

    def test_cell_means(self, base, tmp_path):
        """Test cell means average the repeats."""
        result = run_reduced_data_suite(
            base,
            fractions=(0.5,),
            repeats=2,
            activations=[parse_activation("relu")],
            out_dir=tmp_path / "means",
        )
        cell = result.cell("relu", 0.5)
        accuracies = [r.test_accuracy for r in result.runs]
        assert cell.mean_test_accuracy == pytest.approx(sum(accuracies) / 2)

    def test_workers_do_not_change_results(self, base, tmp_path):
        """Test parallel execution reproduces the sequential results."""
        kwargs = {"fractions": (0.5,), "repeats": 2}
        sequential = run_reduced_data_suite(base, out_dir=tmp_path / "one", **kwargs)
        parallel = run_reduced_data_suite(base, workers=2, out_dir=tmp_path / "two", **kwargs)
        assert outcomes(sequential) == outcomes(parallel)

    def test_invalid_repeats(self, base):
        """Test at least one repeat is required."""
        with pytest.raises(ValueError, match="repeats"):
            run_reduced_data_suite(base, repeats=0)


class TestOverfittingSuite:
    """Tests for run_overfitting_suite."""

    def test_cells(self, base, tmp_path):
        """Test each activation runs with and without dropout on the full set."""
        result = run_overfitting_suite(base, out_dir=tmp_path / "overfit")
        assert len(result.cells) == 4
        labels = {(c.activation, c.dropout) for c in result.cells}
        assert labels == {
            ("relu", False),
            ("relu", True),
            ("probact-fixed-1", False),
            ("probact-fixed-1", True),
        }
        cell = result.cell("probact-fixed-1", dropout=True)
        assert cell.mean_gamma == pytest.approx(
            cell.mean_train_accuracy - cell.mean_test_accuracy
        )

    def test_run_directories(self, base, tmp_path):
        """Test every run gets its own directory."""
        result = run_overfitting_suite(base, out_dir=tmp_path / "overfit")
        dirs = [r.run_dir for r in result.runs]
        assert len(set(dirs)) == len(dirs)
        assert any(d.endswith("dropout0.5") for d in dirs)
