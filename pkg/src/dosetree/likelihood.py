"""Error covariance, leaf marginal likelihoods and full-conditional draws.

Observations are handled as *copies*: one copy is a (particle, replicate)
response profile flattened dose-major to length ``n_dose * n_time``, with
``NaN`` marking unobserved cells. Copies are independent given the leaf
coefficients and share the per-copy correlation ``R``. Everything a leaf needs
from its copies is summarized by :class:`LeafStats`, so the sampler can
evaluate marginals of candidate trees by adding particle summaries together.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.linalg import LinAlgError
from scipy.special import logsumexp
from scipy.stats import invgamma

from dosetree.config import CorrelationPriorParams, VariancePriorParams
from dosetree.exceptions import NumericalError, SplineError

logger = logging.getLogger(__name__)

JITTER = 1e-10
LOG_2PI = math.log(2.0 * math.pi)

Axis = Literal["dose", "time"]
Cholesky = Tuple[np.ndarray, bool]


@dataclass(frozen=True)
class NoiseModel:
    """Residual variance and AR(1) correlations along dose and time."""

    sigma2: float
    phi_d: float
    phi_t: float = 0.0

    def __post_init__(self) -> None:
        if not (self.sigma2 > 0 and math.isfinite(self.sigma2)):
            raise ValueError(f"sigma2 must be positive and finite, got {self.sigma2}")
        for name in ("phi_d", "phi_t"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def with_values(self, **changes: float) -> "NoiseModel":
        values = {"sigma2": self.sigma2, "phi_d": self.phi_d, "phi_t": self.phi_t}
        values.update(changes)
        return NoiseModel(**values)


def ar1_matrix(n: int, phi: float, positions: Optional[np.ndarray] = None) -> np.ndarray:
    """AR(1) correlation ``phi ** |u - v|``.

    Distances are grid positions unless ``positions`` (raw coordinates) is given.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 <= phi <= 1.0:
        raise ValueError(f"phi must lie in [0, 1], got {phi}")
    coords = np.arange(n, dtype=float) if positions is None else np.asarray(positions, float)
    if coords.shape != (n,):
        raise ValueError(f"Expected {n} positions, got shape {coords.shape}")
    distance = np.abs(coords[:, None] - coords[None, :])
    return np.power(phi, distance)


def replicate_correlation(
    n_d: int,
    n_t: int,
    model: NoiseModel,
    dose_positions: Optional[np.ndarray] = None,
    time_positions: Optional[np.ndarray] = None,
    design: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-copy correlation ``ar1(n_d, phi_d) kron ar1(n_t, phi_t)`` in dose-major order.

    Raises:
        SplineError: If ``design`` is given and its row count does not match
    """
    if design is not None and design.shape[0] != n_d * n_t:
        raise SplineError(
            f"Design has {design.shape[0]} rows but the grid has {n_d}x{n_t} = {n_d * n_t} cells"
        )
    r_dose = ar1_matrix(n_d, model.phi_d, dose_positions)
    if n_t == 1:
        return r_dose
    return np.kron(r_dose, ar1_matrix(n_t, model.phi_t, time_positions))


def cholesky(matrix: np.ndarray, what: str = "matrix") -> Cholesky:
    """Lower Cholesky factor, retrying once with a tiny diagonal jitter.

    Raises:
        NumericalError: If the matrix is not positive definite even after jitter
    """
    try:
        return linalg.cho_factor(matrix, lower=True, check_finite=False)
    except LinAlgError:
        pass
    try:
        jittered = matrix + JITTER * np.eye(matrix.shape[0])
        factor = linalg.cho_factor(jittered, lower=True, check_finite=False)
        logger.debug("Cholesky of %s needed jitter", what)
        return factor
    except LinAlgError:
        with np.errstate(all="ignore"):
            condition = float(np.linalg.cond(matrix)) if np.all(np.isfinite(matrix)) else math.inf
        raise NumericalError(f"{what} is not positive definite", condition_number=condition)


def _logdet(factor: Cholesky) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor[0]))))


@dataclass(frozen=True)
class LeafStats:
    """Sufficient statistics of a set of copies for a fixed correlation ``R``.

    ``gram = sum B'R^-1 B``, ``cross = sum B'R^-1 y``, ``sq = sum y'R^-1 y``,
    ``n_obs`` the observed cell count and ``logdet_r`` the summed log
    determinants of the observed blocks of ``R``.
    """

    gram: np.ndarray
    cross: np.ndarray
    sq: float
    n_obs: int
    logdet_r: float

    def residual_quadratic(self, beta: np.ndarray) -> float:
        """``sum (y - B beta)' R^-1 (y - B beta)`` over the copies."""
        return float(self.sq - 2.0 * beta @ self.cross + beta @ self.gram @ beta)


class ParticleStats:
    """Per-particle :class:`LeafStats` arrays, summed on demand for any leaf."""

    def __init__(
        self,
        gram: np.ndarray,
        cross: np.ndarray,
        sq: np.ndarray,
        n_obs: np.ndarray,
        logdet_r: np.ndarray,
    ):
        self.gram = gram
        self.cross = cross
        self.sq = sq
        self.n_obs = n_obs
        self.logdet_r = logdet_r

    @property
    def n_particles(self) -> int:
        return int(self.sq.shape[0])

    def leaf(self, rows: np.ndarray) -> LeafStats:
        return LeafStats(
            gram=self.gram[rows].sum(axis=0),
            cross=self.cross[rows].sum(axis=0),
            sq=float(self.sq[rows].sum()),
            n_obs=int(self.n_obs[rows].sum()),
            logdet_r=float(self.logdet_r[rows].sum()),
        )


def _patterns(observed: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Group copies by missing-cell pattern: ``[(copy indices, cell mask), ...]``."""
    patterns, inverse = np.unique(observed, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    groups = []
    for p, mask in enumerate(patterns):
        if mask.any():
            groups.append((np.flatnonzero(inverse == p), mask))
    return groups


def particle_stats(
    copies: np.ndarray, design: np.ndarray, correlation: np.ndarray
) -> ParticleStats:
    """Summaries of every particle's copies.

    Args:
        copies: ``(n_particles, n_copies, n_cells)`` responses, ``NaN`` = missing
        design: ``(n_cells, M)`` observation design
        correlation: ``(n_cells, n_cells)`` per-copy correlation

    Raises:
        NumericalError: If an observed block of the correlation is singular
    """
    n_particles, n_copies, n_cells = copies.shape
    if design.shape[0] != n_cells or correlation.shape != (n_cells, n_cells):
        raise SplineError(
            f"Copies have {n_cells} cells but design is {design.shape} "
            f"and correlation is {correlation.shape}"
        )
    n_coef = design.shape[1]
    flat = copies.reshape(n_particles * n_copies, n_cells)
    owner = np.repeat(np.arange(n_particles), n_copies)

    gram = np.zeros((n_particles, n_coef, n_coef))
    cross = np.zeros((n_particles, n_coef))
    sq = np.zeros(n_particles)
    n_obs = np.zeros(n_particles, dtype=int)
    logdet_r = np.zeros(n_particles)

    for index, mask in _patterns(~np.isnan(flat)):
        basis = design[mask]
        factor = cholesky(correlation[np.ix_(mask, mask)], "replicate correlation")
        whitened = linalg.cho_solve(factor, basis, check_finite=False)
        values = flat[np.ix_(index, mask)]
        solved = linalg.cho_solve(factor, values.T, check_finite=False)
        particles = owner[index]
        np.add.at(gram, particles, basis.T @ whitened)
        np.add.at(cross, particles, (basis.T @ solved).T)
        np.add.at(sq, particles, np.einsum("ij,ji->i", values, solved))
        np.add.at(n_obs, particles, int(mask.sum()))
        np.add.at(logdet_r, particles, _logdet(factor))

    return ParticleStats(gram, cross, sq, n_obs, logdet_r)


def _precision(stats: LeafStats, penalty: np.ndarray, sigma2: float, tau2: float) -> np.ndarray:
    return penalty / tau2 + stats.gram / sigma2


def log_marginal_from_stats(
    stats: LeafStats,
    penalty: np.ndarray,
    sigma2: float,
    tau2: float,
    logdet_penalty: Optional[float] = None,
) -> float:
    """Leaf log marginal likelihood with the coefficients integrated out.

    Uses the Woodbury and matrix-determinant identities, so the cost depends
    on the coefficient count only.
    """
    n_coef = penalty.shape[0]
    if logdet_penalty is None:
        logdet_penalty = _logdet(cholesky(penalty, "penalty"))
    factor = cholesky(_precision(stats, penalty, sigma2, tau2), "coefficient precision")
    b = stats.cross / sigma2
    fitted = float(b @ linalg.cho_solve(factor, b, check_finite=False))
    logdet = (
        stats.n_obs * math.log(sigma2)
        + stats.logdet_r
        + _logdet(factor)
        - logdet_penalty
        + n_coef * math.log(tau2)
    )
    quad = stats.sq / sigma2 - fitted
    return -0.5 * (stats.n_obs * LOG_2PI + logdet + quad)


def _copies_and_correlation(
    y_leaf: np.ndarray, model: NoiseModel, correlation: Optional[np.ndarray]
) -> Tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y_leaf, dtype=float)
    if y.ndim == 2:
        n_d, n_t = y.shape[1], 1
    elif y.ndim == 3:
        n_d, n_t = y.shape[1], y.shape[2]
    else:
        raise ValueError(
            f"y_leaf must be (copies, n_dose) or (copies, n_dose, n_time), got {y.shape}"
        )
    if correlation is None:
        correlation = replicate_correlation(n_d, n_t, model)
    return y.reshape(y.shape[0], n_d * n_t), correlation


def node_log_marginal(
    y_leaf: np.ndarray,
    design: np.ndarray,
    penalty: np.ndarray,
    model: NoiseModel,
    tau2: float,
    correlation: Optional[np.ndarray] = None,
) -> float:
    """Log density of a leaf's copies under ``y = B beta + e`` with beta integrated out.

    Stacked, the copies are Gaussian with mean zero and covariance
    ``tau2 Bs K^-1 Bs' + sigma2 blockdiag(R)``, where ``Bs`` stacks the design
    once per copy (all copies share the leaf coefficients). When there are at
    least as many coefficients as observed cells the full covariance is
    factorized directly; otherwise the Woodbury form is used.

    Args:
        y_leaf: ``(copies, n_dose)`` or ``(copies, n_dose, n_time)``, ``NaN`` = missing
        design: Observation design of one copy
        penalty: Coefficient prior precision ``K`` (prior covariance ``tau2 K^-1``)
        model: Noise parameters
        tau2: Coefficient prior scale
        correlation: Per-copy correlation overriding the grid-position AR(1)

    Raises:
        NumericalError: If a covariance is not positive definite
    """
    flat, corr = _copies_and_correlation(y_leaf, model, correlation)
    observed = ~np.isnan(flat)
    n_obs = int(observed.sum())
    if n_obs == 0:
        return 0.0
    if penalty.shape[0] < n_obs:
        stats = particle_stats(flat[None, :, :], design, corr).leaf(np.array([0]))
        return log_marginal_from_stats(stats, penalty, model.sigma2, tau2)

    prior_cov = tau2 * linalg.cho_solve(cholesky(penalty, "penalty"), np.eye(penalty.shape[0]))
    bases = [design[mask] for mask in observed if mask.any()]
    blocks = [model.sigma2 * corr[np.ix_(mask, mask)] for mask in observed if mask.any()]
    stacked = np.vstack(bases)
    cov = linalg.block_diag(*blocks) + stacked @ prior_cov @ stacked.T
    values = flat[observed]
    factor = cholesky(cov, "leaf covariance")
    quad = float(values @ linalg.cho_solve(factor, values, check_finite=False))
    return -0.5 * (n_obs * LOG_2PI + _logdet(factor) + quad)


def draw_beta_from_stats(
    stats: LeafStats,
    penalty: np.ndarray,
    sigma2: float,
    tau2: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw leaf coefficients from their Gaussian full conditional."""
    precision = _precision(stats, penalty, sigma2, tau2)
    factor = cholesky(precision, "coefficient precision")
    mean = linalg.cho_solve(factor, stats.cross / sigma2, check_finite=False)
    # L' x = z gives x ~ N(0, P^-1) for P = L L'
    z = rng.standard_normal(mean.shape[0])
    noise = linalg.solve_triangular(factor[0], z, lower=True, trans="T", check_finite=False)
    return mean + noise


def draw_coefficient_prior(
    penalty: np.ndarray, tau2: float, rng: np.random.Generator
) -> np.ndarray:
    """Draw coefficients from the random-walk prior N(0, tau2 K^-1)."""
    factor = cholesky(penalty, "penalty")
    z = rng.standard_normal(penalty.shape[0])
    return math.sqrt(tau2) * linalg.solve_triangular(
        factor[0], z, lower=True, trans="T", check_finite=False
    )


def beta_conditional_moments(
    stats: LeafStats, penalty: np.ndarray, sigma2: float, tau2: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the coefficient full conditional."""
    factor = cholesky(_precision(stats, penalty, sigma2, tau2), "coefficient precision")
    mean = linalg.cho_solve(factor, stats.cross / sigma2, check_finite=False)
    cov = linalg.cho_solve(factor, np.eye(mean.shape[0]), check_finite=False)
    return mean, cov


def draw_beta(
    y_leaf: np.ndarray,
    design: np.ndarray,
    penalty: np.ndarray,
    model: NoiseModel,
    tau2: float,
    rng: np.random.Generator,
    correlation: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Draw leaf coefficients given the leaf's copies (see :func:`node_log_marginal`)."""
    flat, corr = _copies_and_correlation(y_leaf, model, correlation)
    stats = particle_stats(flat[None, :, :], design, corr).leaf(np.array([0]))
    return draw_beta_from_stats(stats, penalty, model.sigma2, tau2, rng)


def draw_inverse_gamma(shape: float, scale: float, rng: np.random.Generator) -> float:
    """One draw from IG(shape, scale), as the reciprocal of a Gamma(shape, 1/scale) draw."""
    return float(1.0 / rng.gamma(shape, 1.0 / scale))


def sigma2_posterior(
    residual_quadratic: float, n_obs: int, priors: VariancePriorParams
) -> Tuple[float, float]:
    """Shape and scale of the sigma^2 full conditional."""
    return priors.a_sigma + 0.5 * n_obs, priors.b_sigma + 0.5 * residual_quadratic


def draw_sigma2(
    residual_quadratic: float,
    n_obs: int,
    priors: VariancePriorParams,
    rng: np.random.Generator,
) -> float:
    """Draw sigma^2 given ``sum r' R^-1 r`` over all copies and the observed cell count."""
    return draw_inverse_gamma(*sigma2_posterior(residual_quadratic, n_obs, priors), rng)


def tau2_posterior(
    coefficients: Sequence[np.ndarray], penalty: np.ndarray, priors: VariancePriorParams
) -> Tuple[float, float]:
    """Shape and scale of the tau^2 full conditional."""
    n_coef = penalty.shape[0]
    quad = sum(float(beta @ penalty @ beta) for beta in coefficients)
    return priors.a_tau + 0.5 * len(coefficients) * n_coef, priors.b_tau + 0.5 * quad


def draw_tau2(
    coefficients: Sequence[np.ndarray],
    penalty: np.ndarray,
    priors: VariancePriorParams,
    rng: np.random.Generator,
) -> float:
    """Draw tau^2 given every leaf's coefficient vector."""
    return draw_inverse_gamma(*tau2_posterior(coefficients, penalty, priors), rng)


def phi_grid(size: int = 201) -> np.ndarray:
    return np.linspace(0.0, 1.0, size)


def _log_cell_widths(grid: np.ndarray) -> np.ndarray:
    """Log widths of the grid cells; the two end cells are halved by the [0, 1] support."""
    widths = np.full(grid.size, 1.0 / (grid.size - 1))
    widths[[0, -1]] *= 0.5
    return np.log(widths)


def log_phi_prior(
    grid: np.ndarray, axis: Axis, n_d: int, n_t: int, priors: CorrelationPriorParams
) -> np.ndarray:
    """Unnormalized log density of the truncated conjugate prior on a phi grid."""
    if axis == "dose":
        exponent = n_t * (n_d - 1) / 2.0
        c1, c2, c3 = priors.lambda01, priors.lambda02, priors.lambda03
    else:
        exponent = n_d * (n_t - 1) / 2.0
        c1, c2, c3 = priors.gamma01, priors.gamma02, priors.gamma03
    out = np.full(grid.shape, -np.inf)
    inside = grid < 1.0
    phi = grid[inside]
    one_minus = 1.0 - phi**2
    out[inside] = -exponent * np.log(one_minus) - (c1 - phi * c2 + phi**2 * c3) / (2 * one_minus)
    return out


def _band_statistics(
    residuals: np.ndarray, axis: Axis, other: np.ndarray
) -> Tuple[float, float, float]:
    """Trace, off-diagonal sum and interior-diagonal sum of ``sum E R_other^-1 E'``."""
    E = residuals if axis == "dose" else np.swapaxes(residuals, 1, 2)
    inverse = linalg.cho_solve(cholesky(other, "replicate correlation"), np.eye(other.shape[0]))
    W = np.einsum("cus,st,cvt->uv", E, inverse, E)
    s1 = float(np.trace(W))
    s2 = float(np.trace(W, offset=1) + np.trace(W, offset=-1))
    s3 = float(np.diag(W)[1:-1].sum())
    return s1, s2, s3


def _ar1_log_likelihood(
    grid: np.ndarray, residuals: np.ndarray, axis: Axis, model: NoiseModel
) -> np.ndarray:
    """Closed-form AR(1) log likelihood on a grid, complete data and grid-position distances."""
    n_copies, n_d, n_t = residuals.shape
    n_axis, n_other = (n_d, n_t) if axis == "dose" else (n_t, n_d)
    other = ar1_matrix(n_other, model.phi_t if axis == "dose" else model.phi_d)
    s1, s2, s3 = _band_statistics(residuals, axis, other)
    out = np.full(grid.shape, -np.inf)
    inside = grid < 1.0
    phi = grid[inside]
    one_minus = 1.0 - phi**2
    logdet = n_copies * n_other * (n_axis - 1) * np.log(one_minus)
    quad = (s1 - phi * s2 + phi**2 * s3) / one_minus
    out[inside] = -0.5 * (logdet + quad / model.sigma2)
    return out


def _generic_log_likelihood(
    grid: np.ndarray,
    residuals: np.ndarray,
    axis: Axis,
    model: NoiseModel,
    dose_positions: Optional[np.ndarray],
    time_positions: Optional[np.ndarray],
) -> np.ndarray:
    n_copies, n_d, n_t = residuals.shape
    flat = residuals.reshape(n_copies, n_d * n_t)
    groups = _patterns(~np.isnan(flat))
    out = np.full(grid.shape, -np.inf)
    for g, phi in enumerate(grid):
        if phi >= 1.0:
            continue
        trial = model.with_values(**({"phi_d": phi} if axis == "dose" else {"phi_t": phi}))
        corr = replicate_correlation(n_d, n_t, trial, dose_positions, time_positions)
        total = 0.0
        for index, mask in groups:
            factor = cholesky(corr[np.ix_(mask, mask)], "replicate correlation")
            values = flat[np.ix_(index, mask)]
            solved = linalg.cho_solve(factor, values.T, check_finite=False)
            quad = float(np.einsum("ij,ji->", values, solved))
            total += index.size * _logdet(factor) + quad / model.sigma2
        out[g] = -0.5 * total
    return out


def draw_phi(
    axis: Axis,
    residuals: np.ndarray,
    model: NoiseModel,
    priors: CorrelationPriorParams,
    rng: np.random.Generator,
    grid_size: int = 201,
    dose_positions: Optional[np.ndarray] = None,
    time_positions: Optional[np.ndarray] = None,
) -> float:
    """Griddy Gibbs draw of phi_D or phi_T.

    The full conditional is evaluated on ``grid_size`` equispaced points in
    [0, 1]; a point is chosen with its weight times its cell width and the
    draw is uniform over that cell (clipped to [0, 1]).

    Args:
        axis: ``"dose"`` or ``"time"``
        residuals: ``(copies, n_dose, n_time)`` residuals ``y - B beta``, ``NaN`` = missing
        model: Current noise (sigma2 and the other correlation are held fixed)
        priors: Correlation prior scalars
        rng: Random generator
        grid_size: Number of grid points
        dose_positions: Raw dose coordinates for raw-unit distances
        time_positions: Raw time coordinates for raw-unit distances

    Raises:
        NumericalError: If every grid weight underflows
    """
    res = np.asarray(residuals, dtype=float)
    if res.ndim == 2:
        res = res[:, :, None]
    _, n_d, n_t = res.shape
    if (n_d if axis == "dose" else n_t) < 2:
        raise ValueError(f"Cannot sample a {axis} correlation on a single-point axis")
    grid = phi_grid(grid_size)
    raw = dose_positions is not None or time_positions is not None
    with np.errstate(divide="ignore"):
        if raw or np.isnan(res).any():
            loglik = _generic_log_likelihood(grid, res, axis, model, dose_positions, time_positions)
        else:
            loglik = _ar1_log_likelihood(grid, res, axis, model)
        log_weights = log_phi_prior(grid, axis, n_d, n_t, priors) + loglik + _log_cell_widths(grid)
    finite = np.isfinite(log_weights)
    if not finite.any():
        raise NumericalError(
            f"All {axis} correlation grid weights underflow; consider rescaling the responses"
        )
    weights = np.exp(log_weights - logsumexp(log_weights[finite]))
    weights[~finite] = 0.0
    weights /= weights.sum()
    index = int(rng.choice(grid.size, p=weights))
    half = 0.5 / (grid_size - 1)
    low, high = max(0.0, grid[index] - half), min(1.0, grid[index] + half)
    return float(rng.uniform(low, high))


def log_inverse_gamma(value: float, shape: float, scale: float) -> float:
    """Log density of IG(shape, scale) at ``value``."""
    return float(invgamma.logpdf(value, shape, scale=scale))
