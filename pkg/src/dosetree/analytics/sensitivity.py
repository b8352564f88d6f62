"""First-order and total sensitivity indices of the posterior mean surface.

Model evaluations are the noise-free leaf means of each posterior draw on a
pair of Latin hypercube designs over the observed covariate box. Indices are
estimated per draw with the Saltelli (2010) estimators and then averaged.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.stats import qmc

from dosetree.analytics.predictive import leaf_curves, subsample_draws
from dosetree.exceptions import ConfigurationError
from dosetree.sampler import ChainState, PosteriorFit

logger = logging.getLogger(__name__)

MIN_BASE = 16
SensitivityMode = Literal["averaged", "per-point"]


def saltelli_indices(
    f_A: np.ndarray, f_B: np.ndarray, f_AB: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample first-order and total contributions and the output variance.

    Args:
        f_A: Evaluations on design A, ``(n, n_cells)``
        f_B: Evaluations on design B, ``(n, n_cells)``
        f_AB: Evaluations on A with column j taken from B, ``(p, n, n_cells)``

    Returns:
        ``(first, total, var)``: ``first`` and ``total`` have shape
        ``(p, n, n_cells)`` and average over the sample axis to the numerators
        of S and T; ``var`` is the per-cell output variance.
    """
    mean = np.mean(np.concatenate([f_A, f_B]), axis=0)
    f_A, f_B, f_AB = f_A - mean, f_B - mean, f_AB - mean
    var = np.var(np.concatenate([f_A, f_B]), axis=0)
    first = f_B * (f_AB - f_A)
    total = 0.5 * (f_A - f_AB) ** 2
    return first, total, var


@dataclass(frozen=True)
class SensitivityReport:
    """Sensitivity indices with Monte Carlo standard errors.

    ``first``/``total`` are grid-averaged (variance-weighted over cells);
    ``point_first``/``point_total`` hold the per-cell indices, ``(p, n_cells)``.
    ``mode`` says which of the two the report leads with.
    """

    names: Tuple[str, ...]
    first: np.ndarray
    total: np.ndarray
    first_se: np.ndarray
    total_se: np.ndarray
    point_first: np.ndarray
    point_total: np.ndarray
    dose: np.ndarray
    time: np.ndarray
    mode: str
    n_base: int
    n_draws: int
    include_noise: bool = False

    @property
    def flagged(self) -> Tuple[str, ...]:
        """Variables whose total index is over two standard errors below the first-order one."""
        gap = self.first - 2.0 * np.sqrt(self.first_se**2 + self.total_se**2)
        return tuple(n for n, t, g in zip(self.names, self.total, gap) if t < g)

    def ranking(self) -> Tuple[str, ...]:
        """Variable names by decreasing total index."""
        return tuple(self.names[j] for j in np.argsort(-self.total, kind="stable"))

    def to_frame(self) -> pd.DataFrame:
        if self.mode == "per-point":
            p, n_cells = self.point_first.shape
            return pd.DataFrame(
                {
                    "variable": np.repeat(self.names, n_cells),
                    "dose": np.tile(self.dose, p),
                    "time": np.tile(self.time, p),
                    "S": self.point_first.ravel(),
                    "T": self.point_total.ravel(),
                }
            )
        flagged = set(self.flagged)
        return pd.DataFrame(
            {
                "variable": list(self.names),
                "S": self.first,
                "S_se": self.first_se,
                "T": self.total,
                "T_se": self.total_se,
                "flagged": [n in flagged for n in self.names],
            }
        )


def _designs(
    covariates: np.ndarray, n_base: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = covariates.shape[1]
    sampler = qmc.LatinHypercube(d=p, rng=rng)
    low, high = covariates.min(axis=0), covariates.max(axis=0)
    # mapped by hand: qmc.scale rejects constant columns
    A = low + sampler.random(n_base) * (high - low)
    B = low + sampler.random(n_base) * (high - low)
    AB = np.repeat(A[None, :, :], p, axis=0)
    for j in range(p):
        AB[j, :, j] = B[:, j]
    return A, B, AB


def _evaluate(draw: ChainState, design: np.ndarray, rows: np.ndarray) -> np.ndarray:
    return leaf_curves(draw, design)[draw.tree.route(rows)]


def sensitivity_indices(
    fit: PosteriorFit,
    n_base: int = 512,
    mode: SensitivityMode = "averaged",
    rng: Optional[np.random.Generator] = None,
    include_noise: bool = False,
    max_draws: Optional[int] = None,
) -> SensitivityReport:
    """Estimate first-order (S) and total (T) indices of every covariate.

    The uncertainty distribution is uniform on the box spanned by the observed
    covariates. Draws whose mean surface does not vary over the box carry no
    information and are skipped. With ``include_noise`` the indices of each
    draw are scaled by ``V / (V + sigma^2)``, the share of predictive variance
    due to the mean surface.

    Raises:
        ConfigurationError: If ``n_base`` is below 16 or the mode is unknown
        ValueError: If the fit holds no draws
    """
    if n_base < MIN_BASE:
        raise ConfigurationError(f"n_base must be >= {MIN_BASE}, got {n_base}")
    if mode not in ("averaged", "per-point"):
        raise ConfigurationError(f"Unknown sensitivity mode {mode!r}")
    draws = subsample_draws(fit.draws, max_draws)
    if not draws:
        raise ValueError("The fit holds no draws")
    rng = rng if rng is not None else np.random.default_rng()

    A, B, AB = _designs(fit.covariates, n_base, rng)
    p = A.shape[1]
    design = fit.system.design
    n_cells = design.shape[0]

    averaged: Dict[str, List[np.ndarray]] = {"S": [], "T": [], "S_se": [], "T_se": []}
    point_first = np.zeros((p, n_cells))
    point_total = np.zeros((p, n_cells))
    point_weight = np.zeros(n_cells)
    skipped = 0
    for draw in draws:
        f_A = _evaluate(draw, design, A)
        f_B = _evaluate(draw, design, B)
        f_AB = _evaluate(draw, design, AB.reshape(-1, p)).reshape(p, n_base, n_cells)
        stacked = np.concatenate([f_A, f_B])
        varying = np.any(stacked != stacked[0], axis=0)
        if not varying.any():
            skipped += 1
            continue
        first, total, var = saltelli_indices(f_A, f_B, f_AB)
        V = float(var.sum())
        scale = V / (V + n_cells * draw.noise.sigma2) if include_noise else 1.0

        contributions_S = first.sum(axis=2) / V
        contributions_T = total.sum(axis=2) / V
        averaged["S"].append(scale * contributions_S.mean(axis=1))
        averaged["T"].append(scale * contributions_T.mean(axis=1))
        averaged["S_se"].append(scale * contributions_S.std(axis=1, ddof=1) / np.sqrt(n_base))
        averaged["T_se"].append(scale * contributions_T.std(axis=1, ddof=1) / np.sqrt(n_base))

        cell_scale = var / (var + draw.noise.sigma2) if include_noise else np.ones(n_cells)
        with np.errstate(invalid="ignore", divide="ignore"):
            S_cells = np.where(varying, first.mean(axis=1) / var, 0.0) * cell_scale
            T_cells = np.where(varying, total.mean(axis=1) / var, 0.0) * cell_scale
        point_first += S_cells
        point_total += T_cells
        point_weight += varying

    if skipped:
        logger.info("Skipped %d of %d draws with a flat mean surface", skipped, len(draws))
    used = len(draws) - skipped
    names = tuple(fit.covariate_names)
    dose, time = fit.system.cell_coordinates()
    if used == 0:
        logger.warning("Every draw has a flat mean surface; all indices are zero")
        zeros = np.zeros(p)
        return SensitivityReport(
            names, zeros, zeros, zeros, zeros, np.zeros((p, n_cells)), np.zeros((p, n_cells)),
            dose, time, mode, n_base, 0, include_noise,
        )

    # per-draw estimates share the same design, so standard errors are averaged, not pooled
    first_mean = np.mean(averaged["S"], axis=0)
    total_mean = np.mean(averaged["T"], axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        point_first = np.where(point_weight > 0, point_first / point_weight, 0.0)
        point_total = np.where(point_weight > 0, point_total / point_weight, 0.0)
    report = SensitivityReport(
        names=names,
        first=np.clip(first_mean, 0.0, 1.0),
        total=np.clip(total_mean, 0.0, 1.0),
        first_se=np.mean(averaged["S_se"], axis=0),
        total_se=np.mean(averaged["T_se"], axis=0),
        point_first=np.clip(point_first, 0.0, 1.0),
        point_total=np.clip(point_total, 0.0, 1.0),
        dose=dose,
        time=time,
        mode=mode,
        n_base=n_base,
        n_draws=used,
        include_noise=include_noise,
    )
    if report.flagged:
        logger.warning(
            "Total index below first-order index beyond Monte Carlo error for: %s",
            ", ".join(report.flagged),
        )
    return report
