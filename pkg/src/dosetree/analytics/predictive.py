"""Posterior predictive profiles and coverage checks."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from dosetree.datastore import ExposureDataset
from dosetree.exceptions import SplineError
from dosetree.likelihood import cholesky
from dosetree.sampler import ChainState, PosteriorFit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PredictiveSummary:
    """Pointwise posterior predictive mean and equal-tailed interval on the grid cells."""

    dose: np.ndarray
    time: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    samples: Optional[np.ndarray] = None

    def coverage(self, observed: np.ndarray) -> float:
        """Fraction of observed cells (``NaN`` skipped) inside the interval."""
        values = np.asarray(observed, dtype=float).reshape(-1, self.mean.size)
        seen = ~np.isnan(values)
        if not seen.any():
            return float("nan")
        inside = (values >= self.lower) & (values <= self.upper)
        return float(inside[seen].mean())

    def rmse(self, observed: np.ndarray) -> float:
        values = np.asarray(observed, dtype=float).reshape(-1, self.mean.size)
        errors = (values - self.mean)[~np.isnan(values)]
        return float(np.sqrt(np.mean(errors**2))) if errors.size else float("nan")

    def to_frame(self, particle: Optional[str] = None) -> pd.DataFrame:
        frame = pd.DataFrame(
            {"dose": self.dose, "time": self.time, "mean": self.mean,
             "lower": self.lower, "upper": self.upper}
        )
        if particle is not None:
            frame.insert(0, "particle", particle)
        return frame


def _check_x(fit: PosteriorFit, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size != fit.n_covariates:
        raise ValueError(f"Expected {fit.n_covariates} covariates, got {x.size}")
    return x


def leaf_curves(draw: ChainState, design: np.ndarray) -> np.ndarray:
    """Mean profile of every leaf of a draw, ``(n_leaves, n_cells)``."""
    coeffs = np.vstack(draw.tree.leaf_coeffs)
    return coeffs @ design.T


def subsample_draws(draws: List[ChainState], max_draws: Optional[int]) -> List[ChainState]:
    """At most ``max_draws`` evenly spaced draws, first and last included."""
    if max_draws is None or len(draws) <= max_draws:
        return draws
    picks = np.linspace(0, len(draws) - 1, max_draws).round().astype(int)
    return [draws[i] for i in picks]


def mean_profiles(fit: PosteriorFit, x: np.ndarray) -> np.ndarray:
    """Noise-free mean profile of a covariate vector under every draw, ``(n_draws, n_cells)``."""
    x = _check_x(fit, x)
    design = fit.system.design
    return np.vstack(
        [leaf_curves(d, design)[int(d.tree.route(x[None, :])[0])] for d in fit.draws]
    )


def posterior_predictive(
    fit: PosteriorFit,
    x_star: np.ndarray,
    level: float = 0.90,
    rng: Optional[np.random.Generator] = None,
    keep_samples: bool = False,
) -> PredictiveSummary:
    """Predictive distribution of a new replicate profile at covariates ``x_star``.

    Every draw routes ``x_star`` to a leaf, takes that leaf's mean profile and
    adds one Gaussian error profile with covariance ``sigma2 R``.

    Raises:
        ValueError: If the chain is empty, the level is outside (0, 1) or
            ``x_star`` has the wrong length
    """
    if not fit.draws:
        raise ValueError("The fit holds no draws")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    rng = rng if rng is not None else np.random.default_rng()
    means = mean_profiles(fit, x_star)
    samples = np.empty_like(means)
    for m, draw in enumerate(fit.draws):
        factor = cholesky(fit.correlation(draw.noise), "replicate correlation")
        lower = np.tril(factor[0])
        noise = np.sqrt(draw.noise.sigma2) * (lower @ rng.standard_normal(means.shape[1]))
        samples[m] = means[m] + noise

    tail = 0.5 * (1.0 - level)
    low, high = np.quantile(samples, [tail, 1.0 - tail], axis=0)
    mean = samples.mean(axis=0)
    dose, time = fit.system.cell_coordinates()
    return PredictiveSummary(
        dose=dose,
        time=time,
        mean=mean,
        lower=np.minimum(low, mean),
        upper=np.maximum(high, mean),
        level=level,
        samples=samples if keep_samples else None,
    )


def check_grids(fit: PosteriorFit, dataset: ExposureDataset) -> None:
    """Raise SplineError unless the dataset sits on the fit's dose and time grids."""
    if dataset.dose_grid != fit.system.dose_grid or dataset.time_grid != fit.system.time_grid:
        raise SplineError(
            "chain/data grid mismatch: the dataset's dose or time grid differs from the chain's"
        )


def posterior_predictive_check(
    fit: PosteriorFit,
    dataset: ExposureDataset,
    level: float = 0.90,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Dict[str, PredictiveSummary], pd.DataFrame]:
    """Predictive summaries for every training particle and their coverage table.

    Raises:
        SplineError: If the dataset grids differ from the fit's grids
    """
    check_grids(fit, dataset)
    rng = rng if rng is not None else np.random.default_rng()
    summaries: Dict[str, PredictiveSummary] = {}
    rows: List[Dict[str, object]] = []
    copies = dataset.copies()
    for i, particle in enumerate(dataset.particles):
        summary = posterior_predictive(fit, dataset.covariates[i], level, rng)
        summaries[particle] = summary
        rows.append(
            {
                "particle": particle,
                "n_obs": int((~np.isnan(copies[i])).sum()),
                "coverage": summary.coverage(copies[i]),
                "rmse": summary.rmse(copies[i]),
            }
        )
    table = pd.DataFrame(rows)
    observed = ~np.isnan(copies)
    overall = float(
        np.sum(table["coverage"].to_numpy() * table["n_obs"].to_numpy()) / observed.sum()
    )
    logger.info("Pointwise %.0f%% predictive coverage: %.3f", 100 * level, overall)
    return summaries, table


def summaries_frame(summaries: Dict[str, PredictiveSummary]) -> pd.DataFrame:
    return pd.concat([s.to_frame(name) for name, s in summaries.items()], ignore_index=True)
