"""B-spline bases on dose/time grids and random-walk penalty matrices.

Coefficients of two-dimensional (dose x time) leaf surfaces are stacked
dose-major: coefficient ``l * n_coef_t + m`` multiplies ``B_l(d) * B_m(t)``,
and observation ``u * n_t + v`` is dose ``u`` at time ``v``. Every module that
builds Kronecker-structured matrices relies on this single ordering.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import BSpline

from dosetree.exceptions import SplineError

DEFAULT_ETA = 1e-6


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Grid1D:
    """An ordered evaluation grid (doses in ug/ml or times in hours)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size < 2:
            raise SplineError(f"A grid needs at least 2 points, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise SplineError("Grid values must be finite")
        if np.any(np.diff(values) <= 0):
            raise SplineError("Grid values must be strictly increasing")
        object.__setattr__(self, "values", _frozen(values))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Grid1D):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))

    def __hash__(self) -> int:
        return hash(self.values.tobytes())

    @property
    def n(self) -> int:
        """Number of grid points."""
        return int(self.values.size)

    @property
    def lower(self) -> float:
        return float(self.values[0])

    @property
    def upper(self) -> float:
        return float(self.values[-1])

    def index_of(self, value: float, tol: float = 1e-9) -> int:
        """Return the position of ``value`` on the grid.

        Raises:
            SplineError: If the value is not a grid point
        """
        hits = np.flatnonzero(np.abs(self.values - value) <= tol * max(1.0, abs(value)))
        if hits.size == 0:
            raise SplineError(
                f"{value!r} is not on the grid [{', '.join(f'{v:g}' for v in self.values)}]"
            )
        return int(hits[0])


def build_basis(grid: Grid1D, interior_knots: Sequence[float], order: int) -> np.ndarray:
    """Evaluate a clamped B-spline basis of a given order on a grid.

    The knot vector repeats each grid boundary ``order`` times and places the
    interior knots in between, so the basis has ``len(interior_knots) + order``
    functions.

    Args:
        grid: Evaluation points
        interior_knots: Strictly increasing knots strictly inside the grid range
        order: Spline order (degree + 1), at least 1

    Returns:
        Matrix of shape ``(grid.n, len(interior_knots) + order)``

    Raises:
        SplineError: If the order or the knots are invalid
    """
    if order < 1:
        raise SplineError(f"Spline order must be >= 1, got {order}")
    knots = np.asarray(interior_knots, dtype=float).ravel()
    if knots.size and (knots[0] <= grid.lower or knots[-1] >= grid.upper):
        raise SplineError(
            f"Interior knots must lie strictly inside [{grid.lower:g}, {grid.upper:g}]"
        )
    if knots.size > 1 and np.any(np.diff(knots) <= 0):
        raise SplineError("Interior knots must be strictly increasing")

    full_knots = np.concatenate(
        [np.full(order, grid.lower), knots, np.full(order, grid.upper)]
    )
    basis = BSpline.design_matrix(grid.values, full_knots, order - 1).toarray()
    return basis


def penalty_1d(size: int, eta: float = DEFAULT_ETA) -> np.ndarray:
    """First-order random-walk penalty with corners lifted by ``eta``.

    With ``eta = 0`` the quadratic form is the sum of squared differences of
    adjacent coefficients, which annihilates constants.
    """
    if size < 2:
        raise SplineError(f"Penalty size must be >= 2, got {size}")
    if eta < 0:
        raise SplineError(f"eta must be non-negative, got {eta}")
    penalty = 2.0 * np.eye(size) - np.eye(size, k=1) - np.eye(size, k=-1)
    penalty[0, 0] = penalty[-1, -1] = 1.0 + eta
    return penalty


def penalty_2d(size_d: int, size_t: int, eta: float = DEFAULT_ETA) -> np.ndarray:
    """Four-nearest-neighbour penalty on a ``size_d x size_t`` coefficient lattice.

    The matrix is the graph Laplacian of the lattice (dose-major ordering) with
    ``eta`` added at the four lattice corners.
    """
    if size_d < 2 or size_t < 2:
        raise SplineError(f"Lattice must be at least 2x2, got {size_d}x{size_t}")
    if eta < 0:
        raise SplineError(f"eta must be non-negative, got {eta}")
    path_d = penalty_1d(size_d, 0.0)
    path_t = penalty_1d(size_t, 0.0)
    penalty = np.kron(path_d, np.eye(size_t)) + np.kron(np.eye(size_d), path_t)
    corners = [0, size_t - 1, (size_d - 1) * size_t, size_d * size_t - 1]
    penalty[corners, corners] += eta
    return penalty


@dataclass(frozen=True, eq=False)
class SplineSystem:
    """Basis matrices, knots and penalty for 1D curves or 2D surfaces."""

    dose_grid: Grid1D
    order_d: int
    interior_knots_d: np.ndarray
    basis_d: np.ndarray
    penalty: np.ndarray
    eta: float
    time_grid: Optional[Grid1D] = None
    order_t: int = 4
    interior_knots_t: np.ndarray = field(default_factory=lambda: _frozen(np.empty(0)))
    basis_t: Optional[np.ndarray] = None

    @classmethod
    def build(
        cls,
        dose_grid: Grid1D,
        time_grid: Optional[Grid1D] = None,
        order_d: int = 4,
        order_t: int = 4,
        knots_d: Optional[Sequence[float]] = None,
        knots_t: Optional[Sequence[float]] = None,
        eta: float = DEFAULT_ETA,
    ) -> "SplineSystem":
        """Build the spline system, placing knots at every interior grid point by default.

        Raises:
            SplineError: If knots, orders or the penalty are invalid
        """
        if eta <= 0:
            raise SplineError(f"eta must be positive to make the penalty proper, got {eta}")
        interior_d = dose_grid.values[1:-1] if knots_d is None else np.asarray(knots_d, float)
        basis_d = build_basis(dose_grid, interior_d, order_d)

        if time_grid is None:
            penalty = penalty_1d(basis_d.shape[1], eta)
            interior_t = np.empty(0)
            basis_t = None
        else:
            interior_t = time_grid.values[1:-1] if knots_t is None else np.asarray(knots_t, float)
            basis_t = build_basis(time_grid, interior_t, order_t)
            penalty = penalty_2d(basis_d.shape[1], basis_t.shape[1], eta)

        smallest = float(np.linalg.eigvalsh(penalty)[0])
        if smallest <= 0:
            raise SplineError(
                f"Penalty is not positive definite (smallest eigenvalue {smallest:g})"
            )

        return cls(
            dose_grid=dose_grid,
            order_d=order_d,
            interior_knots_d=_frozen(interior_d),
            basis_d=_frozen(basis_d),
            penalty=_frozen(penalty),
            eta=float(eta),
            time_grid=time_grid,
            order_t=order_t,
            interior_knots_t=_frozen(interior_t),
            basis_t=None if basis_t is None else _frozen(basis_t),
        )

    @property
    def is_2d(self) -> bool:
        return self.time_grid is not None

    @property
    def n_dose(self) -> int:
        return self.dose_grid.n

    @property
    def n_time(self) -> int:
        return 1 if self.time_grid is None else self.time_grid.n

    @property
    def n_points(self) -> int:
        """Number of (dose, time) cells in one replicate profile."""
        return self.n_dose * self.n_time

    @property
    def n_coefficients(self) -> int:
        return int(self.penalty.shape[0])

    @cached_property
    def design(self) -> np.ndarray:
        return design_matrix(self)

    def cell_coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        """Dose and time of every observation cell, dose-major (time is 0 in 1D)."""
        times = np.zeros(1) if self.time_grid is None else self.time_grid.values
        dose, time = np.meshgrid(self.dose_grid.values, times, indexing="ij")
        return dose.ravel(), time.ravel()

    def cell_index(self, dose: float, time: Optional[float] = None) -> int:
        """Position of the cell at ``(dose, time)``.

        Raises:
            SplineError: If the point is not on the grids
        """
        u = self.dose_grid.index_of(dose)
        if self.time_grid is None:
            if time not in (None, 0, 0.0):
                raise SplineError("Dose-only data have no time axis")
            return u
        if time is None:
            raise SplineError("A time is required for dose x time data")
        return u * self.time_grid.n + self.time_grid.index_of(time)


def design_matrix(system: SplineSystem) -> np.ndarray:
    """Observation design matrix of a spline system.

    1D systems return the dose basis. 2D systems return the row-wise Kronecker
    combination of the dose and time bases, rows ordered dose-major.
    """
    if system.basis_t is None:
        return system.basis_d
    design = np.kron(system.basis_d, system.basis_t)
    design.setflags(write=False)
    return design
