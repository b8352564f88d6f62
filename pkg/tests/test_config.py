"""Tests for configuration management."""

from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError
from pytest import MonkeyPatch

from dosetree.config import McmcConfig, RunConfig, load_config, parse_flat, save_config
from dosetree.exceptions import ConfigurationError


def test_config_defaults() -> None:
    """Test default configuration values."""
    config = RunConfig()

    assert config.iterations == 160_000
    assert config.burn_in == 80_000
    assert config.thin == 10
    assert config.move_probs == (0.1, 0.1, 0.6, 0.2)
    assert config.alpha == 0.95 and config.nu == 2.0
    assert config.distance == "index"
    assert config.replicate_mode == "independent"
    assert config.level == 0.90
    assert config.checkpoint_every == 0


def test_config_from_env(monkeypatch: MonkeyPatch) -> None:
    """Test configuration from environment variables."""
    monkeypatch.setenv("DOSETREE_ITERATIONS", "500")
    monkeypatch.setenv("DOSETREE_BURN_IN", "100")

    config = load_config()

    assert config.iterations == 500
    assert config.burn_in == 100


def test_config_file_and_overrides(tmp_path: Path) -> None:
    """File values beat defaults; explicit overrides beat the file."""
    path = tmp_path / "run.cfg"
    path.write_text("# short run\niterations=400\nburn_in=200\nseed=3\nclamp_phi_d=\n")

    config = load_config(path, seed=9, thin=None)

    assert config.iterations == 400
    assert config.seed == 9
    assert config.thin == 10
    assert config.clamp_phi_d is None


def test_unknown_key_is_rejected(tmp_path: Path) -> None:
    path = tmp_path / "run.cfg"
    path.write_text("iterations=400\nburn_in=200\niteratons=5\n")

    with pytest.raises(ConfigurationError, match="unknown key 'iteratons'"):
        load_config(path)


def test_missing_config_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "absent.cfg")


@pytest.mark.parametrize(
    "values",
    [
        {"iterations": 100, "burn_in": 100},
        {"move_grow": 0.5},
        {"level": 1.5},
        {"distance": "metres"},
        {"n_base": 8},
    ],
)
def test_config_validation(values: dict) -> None:
    """Test configuration validation."""
    with pytest.raises(ConfigurationError):
        load_config(**values)
    with pytest.raises(ValidationError):
        RunConfig(**values)


def test_save_and_load_round_trip(tmp_path: Path) -> None:
    config = RunConfig(
        iterations=1000, burn_in=10, clamp_sigma2=0.25, include_noise=True, knots_d="1,10"
    )
    path = tmp_path / "run.cfg"

    save_config(config, path)

    assert load_config(path) == config
    assert parse_flat(path)["clamp_tau2"] == ""


def test_knots() -> None:
    assert RunConfig().knots("d") is None
    assert RunConfig(knots_t="6, 12").knots("t") == (6.0, 12.0)
    with pytest.raises(ConfigurationError):
        RunConfig(knots_d="1,x").knots("d")


def test_identity_correlation_priors() -> None:
    priors = RunConfig().correlation_priors(5, 3)

    assert (priors.lambda01, priors.lambda02, priors.lambda03) == (5.0, 0.0, 3.0)
    assert (priors.gamma01, priors.gamma02, priors.gamma03) == (3.0, 0.0, 1.0)
    assert RunConfig().correlation_priors(5).gamma01 == 0.0


def test_correlation_prior_matrix_file(tmp_path: Path) -> None:
    path = tmp_path / "lambda.txt"
    np.savetxt(path, np.array([[1.0, 0.5, 0.0], [0.5, 2.0, 0.5], [0.0, 0.5, 3.0]]))

    priors = RunConfig(lambda_matrix=str(path)).correlation_priors(3)

    assert (priors.lambda01, priors.lambda02, priors.lambda03) == (6.0, 2.0, 2.0)
    with pytest.raises(ConfigurationError, match="4x4"):
        RunConfig(lambda_matrix=str(path)).correlation_priors(4)
    with pytest.raises(ConfigurationError):
        RunConfig(lambda_matrix=str(tmp_path / "none.txt")).correlation_priors(3)


def test_to_mcmc() -> None:
    mcmc = RunConfig(iterations=100, burn_in=40, thin=7, alpha=0.5, checkpoint_every=25).to_mcmc(6)

    assert mcmc.n_stored == 8
    assert mcmc.checkpoint_every == 25
    assert mcmc.tree_prior.alpha == 0.5
    assert mcmc.correlation_priors.lambda01 == 6.0


def test_mcmc_config_consistency() -> None:
    with pytest.raises(ValueError):
        McmcConfig(iterations=10, burn_in=10)
    with pytest.raises(ValueError):
        McmcConfig(iterations=10, burn_in=0, move_probs=(0.5, 0.5, 0.5, 0.0))
    assert McmcConfig(iterations=12, burn_in=2, thin=1).n_stored == 10
