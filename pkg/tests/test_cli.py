"""Tests for the command-line interface."""

from pathlib import Path

import pandas as pd
import pytest
from pytest_mock import MockerFixture
from typer.testing import CliRunner

from dosetree.__version__ import __version__
from dosetree.chain_store import CheckpointStore, load_fit
from dosetree.cli import app

runner = CliRunner()

SHORT_RUN = ["--iterations", "40", "--burn-in", "20", "--thin", "2", "--chains", "1", "--seed", "5"]


@pytest.fixture
def simulated(tmp_path: Path) -> Path:
    """A small simulated screen written by the simulate command."""
    spec = tmp_path / "sim.cfg"
    spec.write_text(
        "preset=default\nn_particles=6\nn_replicates=2\nn_doses=5\n"
        "n_covariates=2\nsplit_vars=0\nn_trays=0\n",
        encoding="utf-8",
    )
    target = tmp_path / "data"
    result = runner.invoke(app, ["simulate", "--spec", str(spec), "--seed", "1", "-o", str(target)])
    assert result.exit_code == 0, result.output
    return target


@pytest.fixture
def fitted(simulated: Path, tmp_path: Path) -> Path:
    """Output directory of a short fit on the simulated screen."""
    out = tmp_path / "fit"
    result = runner.invoke(
        app,
        [
            "fit",
            "-d", str(simulated / "responses.csv"),
            "-x", str(simulated / "covariates.csv"),
            "-o", str(out),
            *SHORT_RUN,
        ],
    )
    assert result.exit_code == 0, result.output
    return out


def test_version() -> None:
    """Test version command."""
    result = runner.invoke(app, ["version"])

    assert result.exit_code == 0
    assert __version__ in result.output


def test_config_command(tmp_path: Path) -> None:
    path = tmp_path / "run.cfg"
    path.write_text("iterations=500\nburn_in=100\n", encoding="utf-8")

    result = runner.invoke(app, ["config", "-c", str(path)])

    assert result.exit_code == 0, result.output
    assert "500" in result.output


def test_config_command_rejects_unknown_key(tmp_path: Path) -> None:
    path = tmp_path / "run.cfg"
    path.write_text("iteratons=500\n", encoding="utf-8")

    result = runner.invoke(app, ["config", "-c", str(path)])

    assert result.exit_code == 2


def test_simulate_writes_data_and_truth(simulated: Path) -> None:
    names = {p.name for p in simulated.iterdir()}

    assert {"responses.csv", "covariates.csv", "truth.cfg", "truth_means.csv"} <= names
    assert len(pd.read_csv(simulated / "covariates.csv")) == 6


def test_fit_writes_chain_and_tables(fitted: Path) -> None:
    posterior = load_fit(fitted / "chain" / "chain.bin")

    assert len(posterior.chains) == 1
    assert posterior.chains[0].n_draws == 10
    for name in ("diagnostics", "acceptance", "trace"):
        assert (fitted / "tables" / f"{name}.csv").is_file()
    assert (fitted / "figures" / "trace.svg").is_file()
    assert (fitted / "run.cfg").is_file()


def test_missing_data_file_exits_with_input_error(tmp_path: Path) -> None:
    result = runner.invoke(
        app,
        ["fit", "-d", str(tmp_path / "none.csv"), "-x", str(tmp_path / "none.csv"), *SHORT_RUN],
    )

    assert result.exit_code == 2
    assert "not found" in result.output


def test_inconsistent_run_settings(simulated: Path, tmp_path: Path) -> None:
    result = runner.invoke(
        app,
        [
            "fit",
            "-d", str(simulated / "responses.csv"),
            "-x", str(simulated / "covariates.csv"),
            "-o", str(tmp_path / "fit"),
            "--iterations", "10", "--burn-in", "10",
        ],
    )

    assert result.exit_code == 2


def test_analytics_commands(fitted: Path, simulated: Path, tmp_path: Path) -> None:
    chain = str(fitted / "chain" / "chain.bin")
    data = ["-d", str(simulated / "responses.csv"), "-x", str(simulated / "covariates.csv")]
    out = tmp_path / "report"

    pd_run = runner.invoke(
        app, ["pd", "--chain", chain, "--vars", "x1", "--grid-size", "5", "-o", str(out)]
    )
    assert pd_run.exit_code == 0, pd_run.output
    assert len(pd.read_csv(out / "tables" / "pd_x1.csv")) == 5 * 5

    sens_run = runner.invoke(
        app, ["sens", "--chain", chain, "--n-base", "64", "--max-draws", "5", "-o", str(out)]
    )
    assert sens_run.exit_code == 0, sens_run.output
    assert list(pd.read_csv(out / "tables" / "sensitivity.csv")["variable"]) == ["x1", "x2"]

    ppc_run = runner.invoke(app, ["ppc", "--chain", chain, *data, "--seed", "1", "-o", str(out)])
    assert ppc_run.exit_code == 0, ppc_run.output
    coverage = pd.read_csv(out / "tables" / "coverage.csv")
    assert coverage["coverage"].between(0.0, 1.0).all()

    predict_run = runner.invoke(
        app, ["predict", "--chain", chain, "-x", str(simulated / "covariates.csv"), "-o", str(out)]
    )
    assert predict_run.exit_code == 0, predict_run.output
    assert len(list((out / "figures").glob("predict_*.svg"))) == 6


def test_unknown_variable_exits_with_input_error(fitted: Path) -> None:
    chain = str(fitted / "chain" / "chain.bin")

    result = runner.invoke(app, ["pd", "--chain", chain, "--vars", "x9"])

    assert result.exit_code == 2
    assert "Unknown variable" in result.output


def test_loco_command(simulated: Path, tmp_path: Path) -> None:
    out = tmp_path / "loco"

    result = runner.invoke(
        app,
        [
            "loco",
            "-d", str(simulated / "responses.csv"),
            "-x", str(simulated / "covariates.csv"),
            "-o", str(out),
            *SHORT_RUN,
        ],
    )

    assert result.exit_code == 0, result.output
    table = pd.read_csv(out / "tables" / "loco.csv")
    assert len(table) == 6
    assert set(table["status"]) <= {"ok", "failed"}


def test_predict_rejects_data_on_another_grid(fitted: Path, tmp_path: Path) -> None:
    spec = tmp_path / "coarse.cfg"
    spec.write_text(
        "n_particles=6\nn_replicates=2\nn_doses=4\nn_covariates=2\nsplit_vars=0\nn_trays=0\n",
        encoding="utf-8",
    )
    coarse = tmp_path / "coarse"
    assert runner.invoke(app, ["simulate", "--spec", str(spec), "-o", str(coarse)]).exit_code == 0

    result = runner.invoke(
        app,
        [
            "predict",
            "--chain", str(fitted / "chain" / "chain.bin"),
            "-x", str(coarse / "covariates.csv"),
            "-d", str(coarse / "responses.csv"),
            "-o", str(tmp_path / "report"),
        ],
    )

    assert result.exit_code == 2
    assert "grid mismatch" in result.output


def test_interrupted_fit_resumes_to_the_same_chain(
    fitted: Path, simulated: Path, tmp_path: Path, mocker: MockerFixture
) -> None:
    out = tmp_path / "resumable"
    args = [
        "fit",
        "-d", str(simulated / "responses.csv"),
        "-x", str(simulated / "covariates.csv"),
        "-o", str(out),
        *SHORT_RUN,
        "--checkpoint-every", "10",
    ]
    save = CheckpointStore.save

    def save_then_interrupt(store: CheckpointStore, checkpoint) -> None:
        save(store, checkpoint)
        if checkpoint.sweep == 20:
            raise KeyboardInterrupt

    mocker.patch.object(CheckpointStore, "save", save_then_interrupt)
    interrupted = runner.invoke(app, args)
    mocker.stopall()
    assert interrupted.exit_code == 130
    assert (out / "chain" / "checkpoint.bin").is_file()
    assert not (out / "chain" / "chain.bin").exists()

    resumed = runner.invoke(app, [*args, "--resume"])

    assert resumed.exit_code == 0, resumed.output
    assert "Resuming 1 chain" in resumed.output
    assert not (out / "chain" / "checkpoint.bin").exists()
    expected = load_fit(fitted / "chain" / "chain.bin").chains[0]
    chain = load_fit(out / "chain" / "chain.bin").chains[0]
    assert chain.draws == expected.draws
    assert chain.acceptance == expected.acceptance


def test_resume_without_checkpoint_exits_with_input_error(
    simulated: Path, tmp_path: Path
) -> None:
    result = runner.invoke(
        app,
        [
            "fit",
            "-d", str(simulated / "responses.csv"),
            "-x", str(simulated / "covariates.csv"),
            "-o", str(tmp_path / "fresh"),
            *SHORT_RUN,
            "--resume",
        ],
    )

    assert result.exit_code == 2
    assert "Checkpoint file not found" in result.output
