"""Tests for the collapsed leaf likelihood and the full-conditional draws."""

import math

import numpy as np
import pytest
from scipy import linalg
from scipy.integrate import quad
from scipy.stats import multivariate_normal

from dosetree.basis import Grid1D, SplineSystem
from dosetree.config import CorrelationPriorParams, VariancePriorParams
from dosetree.exceptions import NumericalError, SplineError
from dosetree.likelihood import (
    NoiseModel,
    ar1_matrix,
    beta_conditional_moments,
    cholesky,
    draw_beta_from_stats,
    draw_inverse_gamma,
    draw_phi,
    log_marginal_from_stats,
    log_phi_prior,
    node_log_marginal,
    particle_stats,
    phi_grid,
    replicate_correlation,
    sigma2_posterior,
    tau2_posterior,
)


def brute_force_log_density(
    copies: np.ndarray, design: np.ndarray, penalty: np.ndarray, model: NoiseModel,
    tau2: float, correlation: np.ndarray,
) -> float:
    """Joint density of every observed cell, covariance assembled explicitly."""
    observed = ~np.isnan(copies)
    bases = [design[mask] for mask in observed if mask.any()]
    blocks = [model.sigma2 * correlation[np.ix_(mask, mask)] for mask in observed if mask.any()]
    stacked = np.vstack(bases)
    cov = tau2 * stacked @ np.linalg.inv(penalty) @ stacked.T + linalg.block_diag(*blocks)
    return float(multivariate_normal(np.zeros(cov.shape[0]), cov).logpdf(copies[observed]))


def random_instance(rng: np.random.Generator) -> tuple:
    """Small random leaf (up to 2 particles, 2 replicates, 5 doses, 3 times), some cells missing."""
    n_copies = int(rng.integers(1, 3)) * int(rng.integers(1, 3))
    n_d = int(rng.integers(3, 6))
    n_t = int(rng.integers(1, 4))
    dose_grid = Grid1D(np.cumsum(rng.uniform(0.5, 2.0, n_d)))
    time_grid = Grid1D(np.cumsum(rng.uniform(1.0, 3.0, n_t))) if n_t > 1 else None
    system = SplineSystem.build(
        dose_grid, time_grid, order_d=int(rng.integers(2, 5)), order_t=2
    )
    model = NoiseModel(
        float(rng.uniform(0.1, 2.0)), float(rng.uniform(0.0, 0.9)),
        float(rng.uniform(0.0, 0.9)) if n_t > 1 else 0.0,
    )
    tau2 = float(rng.uniform(0.2, 3.0))
    y = rng.normal(size=(n_copies, n_d, n_t))
    y[rng.random(y.shape) < 0.15] = np.nan
    y[0] = rng.normal(size=(n_d, n_t))
    return y, system, model, tau2


def test_ar1_matrix() -> None:
    matrix = ar1_matrix(3, 0.5)

    np.testing.assert_allclose(matrix, [[1, 0.5, 0.25], [0.5, 1, 0.5], [0.25, 0.5, 1]])
    np.testing.assert_allclose(ar1_matrix(3, 0.0), np.eye(3))


def test_ar1_matrix_raw_positions() -> None:
    matrix = ar1_matrix(3, 0.5, np.array([0.0, 1.0, 3.0]))

    assert matrix[0, 2] == pytest.approx(0.125)
    with pytest.raises(ValueError):
        ar1_matrix(3, 0.5, np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        ar1_matrix(3, 1.5)


def test_replicate_correlation_is_dose_major_kronecker() -> None:
    model = NoiseModel(1.0, 0.6, 0.3)
    corr = replicate_correlation(4, 3, model)

    # cells (u=1, v=0) and (u=2, v=2) sit at 3 and 8
    assert corr[3, 8] == pytest.approx(0.6 * 0.3**2)
    with pytest.raises(SplineError):
        replicate_correlation(4, 3, model, design=np.ones((11, 2)))


def test_noise_model_validation() -> None:
    with pytest.raises(ValueError):
        NoiseModel(0.0, 0.5)
    with pytest.raises(ValueError):
        NoiseModel(1.0, 1.2)
    assert NoiseModel(1.0, 0.5).with_values(phi_d=0.1).phi_d == 0.1


def test_cholesky_jitter_and_failure() -> None:
    singular = np.ones((2, 2))
    factor = cholesky(singular)
    assert np.all(np.isfinite(factor[0]))

    with pytest.raises(NumericalError):
        cholesky(-np.eye(2), "negative matrix")


def test_node_log_marginal_matches_brute_force() -> None:
    """Collapsed marginal equals the explicitly assembled Gaussian on random small leaves."""
    rng = np.random.default_rng(2024)
    for _ in range(200):
        y, system, model, tau2 = random_instance(rng)
        n_d, n_t = y.shape[1], y.shape[2]
        corr = replicate_correlation(n_d, n_t, model)
        flat = y.reshape(y.shape[0], -1)
        expected = brute_force_log_density(
            flat, system.design, system.penalty, model, tau2, corr
        )
        leaf = y if n_t > 1 else y[:, :, 0]

        got = node_log_marginal(leaf, system.design, system.penalty, model, tau2)

        assert abs(got - expected) <= 1e-8 * max(1.0, abs(expected))


def test_both_factorizations_agree(system_1d: SplineSystem, rng: np.random.Generator) -> None:
    """One copy (direct path) and many copies (Woodbury path) both match the oracle."""
    model = NoiseModel(0.3, 0.4)
    corr = replicate_correlation(6, 1, model)
    for n_copies in (1, 4):
        y = rng.normal(size=(n_copies, 6))
        expected = brute_force_log_density(y, system_1d.design, system_1d.penalty, model, 1.5, corr)
        got = node_log_marginal(y, system_1d.design, system_1d.penalty, model, 1.5)
        assert got == pytest.approx(expected, abs=1e-8)


def test_all_missing_leaf_has_zero_log_density(system_1d: SplineSystem) -> None:
    y = np.full((2, 6), np.nan)

    noise = NoiseModel(1.0, 0.5)
    assert node_log_marginal(y, system_1d.design, system_1d.penalty, noise, 1.0) == 0.0


def test_leaf_sum_is_invariant_to_particle_order(
    system_1d: SplineSystem, rng: np.random.Generator
) -> None:
    copies = rng.normal(size=(3, 2, 6))
    copies[1, 0, 2] = np.nan
    corr = replicate_correlation(6, 1, NoiseModel(1.0, 0.5))
    stats = particle_stats(copies, system_1d.design, corr)

    forward = log_marginal_from_stats(stats.leaf(np.array([0, 1, 2])), system_1d.penalty, 0.5, 2.0)
    backward = log_marginal_from_stats(stats.leaf(np.array([2, 0, 1])), system_1d.penalty, 0.5, 2.0)

    assert forward == pytest.approx(backward, abs=1e-10)
    assert stats.leaf(np.arange(3)).n_obs == 3 * 2 * 6 - 1


def test_residual_quadratic(system_1d: SplineSystem, rng: np.random.Generator) -> None:
    copies = rng.normal(size=(1, 2, 6))
    corr = replicate_correlation(6, 1, NoiseModel(1.0, 0.3))
    stats = particle_stats(copies, system_1d.design, corr).leaf(np.array([0]))
    beta = rng.normal(size=system_1d.n_coefficients)

    residuals = copies[0] - system_1d.design @ beta
    inverse = np.linalg.inv(corr)
    expected = sum(float(r @ inverse @ r) for r in residuals)

    assert stats.residual_quadratic(beta) == pytest.approx(expected)


def test_particle_stats_shape_mismatch(system_1d: SplineSystem) -> None:
    with pytest.raises(SplineError):
        particle_stats(np.zeros((1, 1, 5)), system_1d.design, np.eye(5))


def test_beta_draws_match_conditional_moments(
    system_1d: SplineSystem, rng: np.random.Generator
) -> None:
    copies = rng.normal(size=(2, 2, 6)) + np.linspace(0, 1, 6)
    corr = replicate_correlation(6, 1, NoiseModel(1.0, 0.4))
    stats = particle_stats(copies, system_1d.design, corr).leaf(np.array([0, 1]))
    mean, cov = beta_conditional_moments(stats, system_1d.penalty, 0.5, 2.0)

    n = 20_000
    draws = np.array(
        [draw_beta_from_stats(stats, system_1d.penalty, 0.5, 2.0, rng) for _ in range(n)]
    )

    standard_error = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 5 * standard_error)
    np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.1 * np.max(np.diag(cov)))


def test_inverse_gamma_draws(rng: np.random.Generator) -> None:
    draws = np.array([draw_inverse_gamma(5.0, 8.0, rng) for _ in range(20_000)])

    assert draws.mean() == pytest.approx(2.0, abs=0.05)


def test_variance_posteriors() -> None:
    priors = VariancePriorParams(a_sigma=1.0, b_sigma=2.0, a_tau=3.0, b_tau=4.0)

    assert sigma2_posterior(10.0, 20, priors) == (11.0, 7.0)
    penalty = np.eye(2)
    shape, scale = tau2_posterior([np.array([1.0, 1.0]), np.array([2.0, 0.0])], penalty, priors)
    assert (shape, scale) == (3.0 + 0.5 * 2 * 2, 4.0 + 0.5 * 6.0)


def test_phi_prior_is_minus_infinity_at_one() -> None:
    priors = CorrelationPriorParams.from_matrices(np.eye(5))
    with np.errstate(divide="ignore"):
        values = log_phi_prior(phi_grid(11), "dose", 5, 1, priors)

    assert values[-1] == -np.inf
    assert np.all(np.isfinite(values[:-1]))


def test_phi_draws_without_data_follow_prior(rng: np.random.Generator) -> None:
    """With every cell missing the griddy Gibbs draws reproduce the prior on the grid."""
    size = 21
    priors = CorrelationPriorParams.from_matrices(np.eye(5))
    residuals = np.full((2, 5, 1), np.nan)
    with np.errstate(divide="ignore"):
        log_prior = log_phi_prior(phi_grid(size), "dose", 5, 1, priors)
    expected = np.exp(log_prior - log_prior[np.isfinite(log_prior)].max())
    expected[[0, -1]] *= 0.5
    expected /= expected.sum()

    n = 20_000
    draws = np.array(
        [draw_phi("dose", residuals, NoiseModel(1.0, 0.5), priors, rng, size) for _ in range(n)]
    )
    cells = np.rint(draws * (size - 1)).astype(int)
    observed = np.bincount(cells, minlength=size) / n

    assert np.all((draws >= 0.0) & (draws <= 1.0))
    assert np.max(np.abs(observed - expected)) < 0.02


def test_phi_draws_near_zero_match_prior_density(rng: np.random.Generator) -> None:
    """The half-width cell at phi = 0 carries the prior mass of [0, half a step)."""
    size = 21
    priors = CorrelationPriorParams.from_matrices(np.eye(5))
    residuals = np.full((2, 5, 1), np.nan)

    def density(phi: float) -> float:
        with np.errstate(divide="ignore"):
            return float(np.exp(log_phi_prior(np.array([phi]), "dose", 5, 1, priors))[0])

    edge = 0.5 / (size - 1)
    expected = quad(density, 0.0, edge)[0] / quad(density, 0.0, 1.0, limit=200)[0]
    noise = NoiseModel(1.0, 0.5)
    draws = np.array(
        [draw_phi("dose", residuals, noise, priors, rng, size) for _ in range(20_000)]
    )

    assert np.mean(draws < edge) == pytest.approx(expected, abs=0.01)


def test_phi_draws_recover_generating_correlation(rng: np.random.Generator) -> None:
    n_copies, n_d = 200, 11
    corr = ar1_matrix(n_d, 0.6)
    lower = np.linalg.cholesky(corr)
    residuals = (rng.standard_normal((n_copies, n_d)) @ lower.T)[:, :, None]

    draws = [
        draw_phi("dose", residuals, NoiseModel(1.0, 0.2), CorrelationPriorParams(), rng)
        for _ in range(200)
    ]

    assert np.mean(draws) == pytest.approx(0.6, abs=0.1)


def test_phi_draws_closed_form_matches_generic(rng: np.random.Generator) -> None:
    """Complete data use the banded closed form; it must agree with the generic path."""
    residuals = rng.standard_normal((6, 5, 3))
    model = NoiseModel(0.8, 0.4, 0.3)
    priors = CorrelationPriorParams()
    seeds = np.random.SeedSequence(9)

    closed = draw_phi("time", residuals, model, priors, np.random.default_rng(seeds), 51)
    # raw positions equal to the grid positions force the generic path
    generic = draw_phi(
        "time", residuals, model, priors, np.random.default_rng(seeds), 51,
        dose_positions=np.arange(5.0), time_positions=np.arange(3.0),
    )
    assert closed == pytest.approx(generic, abs=1e-12)


def test_phi_on_single_point_axis_is_rejected(rng: np.random.Generator) -> None:
    with pytest.raises(ValueError):
        draw_phi("time", np.zeros((2, 5, 1)), NoiseModel(1.0, 0.5), CorrelationPriorParams(), rng)


def test_log_marginal_grows_with_fit_quality(system_1d: SplineSystem) -> None:
    """Data following a smooth curve are more likely than scrambled data of the same scale."""
    curve = np.linspace(0.0, 2.0, 6)
    smooth = np.tile(curve, (4, 1))
    scrambled = np.tile(curve[[3, 0, 5, 1, 4, 2]], (4, 1))
    model = NoiseModel(0.01, 0.0)
    kwargs = dict(design=system_1d.design, penalty=system_1d.penalty, model=model, tau2=1.0)

    assert node_log_marginal(smooth, **kwargs) > node_log_marginal(scrambled, **kwargs)
    assert math.isfinite(node_log_marginal(smooth, **kwargs))
