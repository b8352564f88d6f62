"""Pytest configuration and fixtures."""

from pathlib import Path

import numpy as np
import pytest

from dosetree.analytics import SimulationResult, SimulationSpec, simulate_dataset
from dosetree.basis import Grid1D, SplineSystem
from dosetree.config import RunConfig
from dosetree.datastore import ExposureDataset, write_dataset


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def dose_grid() -> Grid1D:
    """Six-point dose grid starting at zero."""
    return Grid1D(np.array([0.0, 0.3, 1.0, 3.0, 10.0, 30.0]))


@pytest.fixture
def system_1d(dose_grid: Grid1D) -> SplineSystem:
    """Cubic spline system with knots at every interior dose."""
    return SplineSystem.build(dose_grid)


@pytest.fixture
def system_2d(dose_grid: Grid1D) -> SplineSystem:
    """Dose x time tensor-product system on three times."""
    return SplineSystem.build(dose_grid, Grid1D(np.array([6.0, 12.0, 24.0])), order_t=2)


@pytest.fixture
def quick_config(tmp_path: Path) -> RunConfig:
    """Short MCMC run writing into a temporary directory."""
    return RunConfig(
        iterations=60,
        burn_in=20,
        thin=2,
        n_chains=2,
        n_jobs=1,
        seed=7,
        output_dir=tmp_path / "out",
    )


@pytest.fixture
def small_simulation() -> SimulationResult:
    """Dose-only synthetic screen: 8 particles, 3 replicates, split on x1."""
    spec = SimulationSpec.from_preset(
        "default",
        seed=3,
        n_particles=8,
        n_replicates=3,
        n_doses=6,
        n_covariates=3,
        split_vars="0",
        n_trays=0,
    )
    return simulate_dataset(spec)


@pytest.fixture
def small_dataset(small_simulation: SimulationResult) -> ExposureDataset:
    """Dataset of the small synthetic screen."""
    return small_simulation.dataset


@pytest.fixture
def dataset_files(tmp_path: Path, small_dataset: ExposureDataset) -> tuple:
    """Response and covariate CSVs of the small synthetic screen."""
    responses = tmp_path / "responses.csv"
    covariates = tmp_path / "covariates.csv"
    write_dataset(small_dataset, responses, covariates)
    return responses, covariates
