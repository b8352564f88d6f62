"""Tests for posterior predictive summaries."""

import numpy as np
import pytest

from dosetree.analytics import posterior_predictive, posterior_predictive_check
from dosetree.analytics.predictive import (
    check_grids,
    mean_profiles,
    subsample_draws,
    summaries_frame,
)
from dosetree.basis import Grid1D, SplineSystem
from dosetree.config import RunConfig
from dosetree.datastore import ExposureDataset
from dosetree.exceptions import SplineError
from dosetree.sampler import fit_dataset
from dosetree.tree import Tree
from tests.helpers import constant_coeffs, make_fit, split_tree

COVARIATES = np.array([[0.2, 1.0], [0.8, 2.0], [0.5, 3.0]])


def stump(system: SplineSystem, level: float) -> Tree:
    return Tree.stump().with_leaf_coeffs([constant_coeffs(system, level)])


def test_interval_collapses_without_noise(
    system_1d: SplineSystem, rng: np.random.Generator
) -> None:
    fit = make_fit(system_1d, COVARIATES, [stump(system_1d, 2.0)] * 50, sigma2=1e-14)

    summary = posterior_predictive(fit, np.array([0.5, 1.5]), 0.9, rng)

    np.testing.assert_allclose(summary.mean, 2.0, atol=1e-6)
    assert np.max(summary.upper - summary.lower) < 1e-5
    assert summary.coverage(np.full(6, 2.0)) == 1.0
    assert summary.coverage(np.full(6, 2.1)) == 0.0


def test_new_covariates_are_routed(system_1d: SplineSystem, rng: np.random.Generator) -> None:
    tree = split_tree(0, 0.5, constant_coeffs(system_1d, 1.0), constant_coeffs(system_1d, 3.0))
    fit = make_fit(system_1d, COVARIATES, [tree] * 5, sigma2=1e-14)

    low = posterior_predictive(fit, np.array([0.3, 9.0]), rng=rng)
    high = posterior_predictive(fit, np.array([0.9, 9.0]), rng=rng)

    np.testing.assert_allclose(low.mean, 1.0, atol=1e-6)
    np.testing.assert_allclose(high.mean, 3.0, atol=1e-6)
    np.testing.assert_allclose(mean_profiles(fit, np.array([0.5, 0.0])), 1.0, atol=1e-12)


def test_interval_matches_gaussian_quantiles(
    system_1d: SplineSystem, rng: np.random.Generator
) -> None:
    """Identical draws with sigma2 = 1: the 90% interval is about mean +- 1.645."""
    fit = make_fit(system_1d, COVARIATES, [stump(system_1d, 0.0)] * 20_000, sigma2=1.0)

    summary = posterior_predictive(fit, COVARIATES[0], 0.9, rng, keep_samples=True)

    assert summary.samples is not None and summary.samples.shape == (20_000, 6)
    np.testing.assert_allclose(summary.upper, 1.645, atol=0.06)
    np.testing.assert_allclose(summary.lower, -1.645, atol=0.06)
    # neighbouring cells share the phi_d = 0.3 correlation
    assert np.corrcoef(summary.samples[:, 0], summary.samples[:, 1])[0, 1] == pytest.approx(
        0.3, abs=0.03
    )


def test_dose_time_predictions(system_2d: SplineSystem, rng: np.random.Generator) -> None:
    fit = make_fit(system_2d, COVARIATES, [stump(system_2d, 1.0)] * 10, sigma2=1e-14)

    summary = posterior_predictive(fit, COVARIATES[1], rng=rng)
    frame = summary.to_frame("P2")

    assert len(frame) == 18
    assert frame["time"].iloc[:3].tolist() == [6.0, 12.0, 24.0]
    assert list(frame.columns) == ["particle", "dose", "time", "mean", "lower", "upper"]


@pytest.mark.parametrize(
    "x, level",
    [(np.array([0.5]), 0.9), (np.array([0.5, 1.0]), 1.0), (np.array([0.5, 1.0]), 0.0)],
)
def test_invalid_requests(system_1d: SplineSystem, x: np.ndarray, level: float) -> None:
    fit = make_fit(system_1d, COVARIATES, [stump(system_1d, 0.0)])

    with pytest.raises(ValueError):
        posterior_predictive(fit, x, level)


def test_empty_fit(system_1d: SplineSystem) -> None:
    fit = make_fit(system_1d, COVARIATES, [stump(system_1d, 0.0)])
    fit.chains[0].draws = []

    with pytest.raises(ValueError, match="no draws"):
        posterior_predictive(fit, COVARIATES[0])


def test_subsample_keeps_first_and_last(system_1d: SplineSystem) -> None:
    draws = make_fit(
        system_1d, COVARIATES, [stump(system_1d, float(v)) for v in range(10)]
    ).draws

    picked = subsample_draws(draws, 4)

    assert len(picked) == 4
    assert picked[0] is draws[0] and picked[-1] is draws[-1]
    assert subsample_draws(draws, None) is draws


def test_posterior_predictive_check(
    small_dataset: ExposureDataset, quick_config: RunConfig, rng: np.random.Generator
) -> None:
    fit = fit_dataset(small_dataset, quick_config)

    summaries, table = posterior_predictive_check(fit, small_dataset, 0.9, rng)

    assert list(summaries) == list(small_dataset.particles)
    assert table["n_obs"].tolist() == [18] * 8
    assert table["coverage"].between(0.0, 1.0).all()
    assert len(summaries_frame(summaries)) == 8 * 6


def test_check_rejects_other_grids(small_dataset: ExposureDataset) -> None:
    fit = make_fit(
        SplineSystem.build(Grid1D(np.array([0.0, 1.0, 2.0]))),
        small_dataset.covariates,
        [Tree.stump().with_leaf_coeffs([np.zeros(5)])],
    )

    with pytest.raises(SplineError):
        posterior_predictive_check(fit, small_dataset)
    with pytest.raises(SplineError, match="grid mismatch"):
        check_grids(fit, small_dataset)
