"""Partial dependence of the mean response on one or two covariates."""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from dosetree.analytics.predictive import leaf_curves, subsample_draws
from dosetree.sampler import PosteriorFit

logger = logging.getLogger(__name__)

DEFAULT_GRID_SIZE = 50


@dataclass(frozen=True)
class PartialDependence:
    """Draw-averaged partial dependence surface.

    ``values`` has one axis per covariate grid followed by a cell axis; the
    cell axis runs over ``dose``/``time`` (every grid cell, or the single
    requested point).
    """

    variables: Tuple[int, ...]
    names: Tuple[str, ...]
    grids: Tuple[np.ndarray, ...]
    dose: np.ndarray
    time: np.ndarray
    values: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        axes = [*self.grids, np.arange(self.dose.size)]
        mesh = np.meshgrid(*axes, indexing="ij")
        columns = {name: m.ravel() for name, m in zip(self.names, mesh[:-1])}
        cells = mesh[-1].ravel().astype(int)
        columns.update(dose=self.dose[cells], time=self.time[cells], value=self.values.ravel())
        return pd.DataFrame(columns)


def covariate_grid(
    fit: PosteriorFit, j: int, size: int = DEFAULT_GRID_SIZE, log: Optional[bool] = None
) -> np.ndarray:
    """Equispaced grid over the observed range of covariate ``j``.

    Log-scale covariates (or ``log=True``) get geometric spacing when the
    range is positive.
    """
    if size < 2:
        raise ValueError(f"Grid size must be >= 2, got {size}")
    values = fit.covariates[:, j]
    low, high = float(values.min()), float(values.max())
    use_log = fit.log_scale[j] if log is None else log
    if use_log and low > 0:
        return np.geomspace(low, high, size)
    if use_log:
        logger.warning(
            "Covariate %s has non-positive values; using a linear grid", fit.covariate_names[j]
        )
    return np.linspace(low, high, size)


def _cells(fit: PosteriorFit, at: Optional[Tuple[float, Optional[float]]]) -> np.ndarray:
    if at is None:
        return np.arange(fit.system.n_points)
    return np.array([fit.system.cell_index(*at)])


def _average(
    fit: PosteriorFit,
    substitutions: Sequence[Tuple[int, np.ndarray]],
    shape: Tuple[int, ...],
    cells: np.ndarray,
    max_draws: Optional[int],
) -> np.ndarray:
    """Mean over draws of the particle-averaged response with columns replaced.

    ``substitutions`` lists ``(column, values)`` where ``values`` has one entry
    per covariate setting (flattened ``shape``).
    """
    draws = subsample_draws(fit.draws, max_draws)
    if not draws:
        raise ValueError("The fit holds no draws")
    X = fit.covariates
    n_settings = int(np.prod(shape))
    stacked = np.repeat(X[None, :, :], n_settings, axis=0)
    for column, values in substitutions:
        stacked[:, :, column] = values[:, None]
    rows = stacked.reshape(-1, X.shape[1])
    design = fit.system.design[cells]

    total = np.zeros((n_settings, cells.size))
    for draw in draws:
        curves = leaf_curves(draw, design)
        leaves = draw.tree.route(rows).reshape(n_settings, X.shape[0])
        weights = np.zeros((n_settings, curves.shape[0]))
        np.add.at(weights, (np.repeat(np.arange(n_settings), X.shape[0]), leaves.ravel()), 1.0)
        total += (weights / X.shape[0]) @ curves
    return (total / len(draws)).reshape(*shape, cells.size)


def partial_dependence(
    fit: PosteriorFit,
    j: int,
    s_grid: Optional[np.ndarray] = None,
    at: Optional[Tuple[float, Optional[float]]] = None,
    max_draws: Optional[int] = None,
) -> PartialDependence:
    """Average response as covariate ``j`` sweeps ``s_grid``, other covariates as observed.

    Args:
        fit: Posterior fit
        j: Covariate index
        s_grid: Covariate values; defaults to :func:`covariate_grid`
        at: ``(dose, time)`` point to restrict to; every cell when None
        max_draws: Use at most this many evenly spaced draws

    Raises:
        ValueError: If the grid is empty
        SplineError: If ``at`` is not on the dose/time grids
    """
    grid = covariate_grid(fit, j) if s_grid is None else np.asarray(s_grid, dtype=float).ravel()
    if grid.size == 0:
        raise ValueError("Partial dependence grid is empty")
    cells = _cells(fit, at)
    values = _average(fit, [(j, grid)], (grid.size,), cells, max_draws)
    dose, time = fit.system.cell_coordinates()
    return PartialDependence(
        variables=(j,),
        names=(fit.covariate_names[j],),
        grids=(grid,),
        dose=dose[cells],
        time=time[cells],
        values=values,
    )


def partial_dependence_2var(
    fit: PosteriorFit,
    j: int,
    k: int,
    grids: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    at: Optional[Tuple[float, Optional[float]]] = None,
    max_draws: Optional[int] = None,
) -> PartialDependence:
    """Joint partial dependence on covariates ``j`` and ``k``.

    When ``j == k`` the second substitution wins, so the diagonal reproduces
    the one-variable partial dependence.
    """
    if grids is None:
        grids = (covariate_grid(fit, j), covariate_grid(fit, k))
    first = np.asarray(grids[0], dtype=float).ravel()
    second = np.asarray(grids[1], dtype=float).ravel()
    if first.size == 0 or second.size == 0:
        raise ValueError("Partial dependence grid is empty")
    cells = _cells(fit, at)
    mesh_first, mesh_second = np.meshgrid(first, second, indexing="ij")
    values = _average(
        fit,
        [(j, mesh_first.ravel()), (k, mesh_second.ravel())],
        (first.size, second.size),
        cells,
        max_draws,
    )
    dose, time = fit.system.cell_coordinates()
    names = (fit.covariate_names[j], fit.covariate_names[k])
    if j == k:
        names = (names[0], f"{names[1]} (second)")
    return PartialDependence(
        variables=(j, k),
        names=names,
        grids=(first, second),
        dose=dose[cells],
        time=time[cells],
        values=values,
    )
