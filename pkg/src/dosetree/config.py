"""Configuration management for dosetree runs.

A run is configured by a flat ``key=value`` file (the ``.env`` format read by
python-dotenv) layered over ``DOSETREE_*`` environment variables and the
defaults below. Unknown keys are rejected so typos never pass silently.
"""

import math
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple, Union

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from dosetree.exceptions import ConfigurationError

MoveProbs = Tuple[float, float, float, float]


class TreePriorParams(BaseModel):
    """Tree-generating prior: a node at depth q splits with probability alpha*(1+q)^-nu."""

    model_config = ConfigDict(frozen=True)

    alpha: float = Field(default=0.95, ge=0.0, lt=1.0)
    nu: float = Field(default=2.0, ge=0.0)


class VariancePriorParams(BaseModel):
    """Inverse-gamma priors on sigma^2 and tau^2."""

    model_config = ConfigDict(frozen=True)

    a_sigma: float = Field(default=1.0, gt=0.0)
    b_sigma: float = Field(default=1.0, gt=0.0)
    a_tau: float = Field(default=1.0, gt=0.0)
    b_tau: float = Field(default=1.0, gt=0.0)


class CorrelationPriorParams(BaseModel):
    """Scalars of the truncated conjugate priors on phi_D and phi_T."""

    model_config = ConfigDict(frozen=True)

    lambda01: float = 0.0
    lambda02: float = 0.0
    lambda03: float = 0.0
    gamma01: float = 0.0
    gamma02: float = 0.0
    gamma03: float = 0.0

    @staticmethod
    def band_sums(matrix: np.ndarray) -> Tuple[float, float, float]:
        """Diagonal sum, sub+super-diagonal sum and interior-diagonal sum."""
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        if m.shape[0] != m.shape[1]:
            raise ConfigurationError(f"Correlation prior matrix must be square, got {m.shape}")
        diag = np.diag(m)
        first = float(diag.sum())
        second = float(np.diag(m, 1).sum() + np.diag(m, -1).sum())
        third = float(diag[1:-1].sum())
        return first, second, third

    @classmethod
    def from_matrices(
        cls, lambda_matrix: np.ndarray, gamma_matrix: Optional[np.ndarray] = None
    ) -> "CorrelationPriorParams":
        l1, l2, l3 = cls.band_sums(lambda_matrix)
        g1 = g2 = g3 = 0.0
        if gamma_matrix is not None:
            g1, g2, g3 = cls.band_sums(gamma_matrix)
        return cls(lambda01=l1, lambda02=l2, lambda03=l3, gamma01=g1, gamma02=g2, gamma03=g3)


class McmcConfig(BaseModel):
    """Everything the sampler needs, with hyperparameters resolved for a dataset."""

    model_config = ConfigDict(frozen=True)

    iterations: int = Field(default=160_000, ge=1)
    burn_in: int = Field(default=80_000, ge=0)
    thin: int = Field(default=10, ge=1)
    move_probs: MoveProbs = (0.1, 0.1, 0.6, 0.2)
    tree_prior: TreePriorParams = TreePriorParams()
    variance_priors: VariancePriorParams = VariancePriorParams()
    correlation_priors: CorrelationPriorParams = CorrelationPriorParams()
    eta: float = Field(default=1e-6, gt=0.0)
    seed: int = Field(default=20130601, ge=0, lt=2**64)
    n_chains: int = Field(default=4, ge=1)
    n_jobs: int = 1
    tree_steps_per_sweep: int = Field(default=1, ge=1)
    checkpoint_every: int = Field(default=0, ge=0)
    phi_grid_size: int = Field(default=201, ge=3)
    distance: Literal["index", "raw"] = "index"
    replicate_mode: Literal["independent", "shared"] = "independent"
    clamp_sigma2: Optional[float] = Field(default=None, gt=0.0)
    clamp_tau2: Optional[float] = Field(default=None, gt=0.0)
    clamp_phi_d: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    clamp_phi_t: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    debug: bool = False

    @model_validator(mode="after")
    def _check_consistency(self) -> "McmcConfig":
        if self.burn_in >= self.iterations:
            raise ValueError(
                f"burn_in ({self.burn_in}) must be smaller than iterations ({self.iterations})"
            )
        probs = self.move_probs
        if any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
            raise ValueError(f"move probabilities must be non-negative and sum to 1, got {probs}")
        return self

    @property
    def n_stored(self) -> int:
        """Number of draws kept per chain."""
        return (self.iterations - self.burn_in) // self.thin


class RunConfig(BaseSettings):
    """Flat run configuration (MCMC, spline, correlation and analytics settings)."""

    # MCMC
    iterations: int = Field(default=160_000, ge=1, description="Total MCMC sweeps per chain")
    burn_in: int = Field(default=80_000, ge=0, description="Sweeps discarded before storing")
    thin: int = Field(default=10, ge=1, description="Keep every thin-th sweep after burn-in")
    n_chains: int = Field(default=4, ge=1, description="Independent chains")
    n_jobs: int = Field(default=1, description="Parallel workers for chains and folds (-1 = all)")
    seed: int = Field(default=20130601, ge=0, lt=2**64, description="Master random seed")
    tree_steps_per_sweep: int = Field(default=1, ge=1, description="Tree proposals per sweep")
    checkpoint_every: int = Field(
        default=0, ge=0, description="Save each chain's state every N sweeps (0 = never)"
    )
    debug: bool = Field(
        default=False, description="Validate cached log posterior every 1000 sweeps"
    )

    # Tree prior and moves
    alpha: float = Field(default=0.95, ge=0.0, lt=1.0, description="Tree prior base split prob.")
    nu: float = Field(default=2.0, ge=0.0, description="Tree prior depth exponent")
    move_grow: float = Field(default=0.1, ge=0.0, le=1.0, description="GROW probability")
    move_prune: float = Field(default=0.1, ge=0.0, le=1.0, description="PRUNE probability")
    move_change: float = Field(default=0.6, ge=0.0, le=1.0, description="CHANGE probability")
    move_swap: float = Field(default=0.2, ge=0.0, le=1.0, description="SWAP probability")

    # Variance priors
    a_sigma: float = Field(default=1.0, gt=0.0, description="IG shape for sigma^2")
    b_sigma: float = Field(default=1.0, gt=0.0, description="IG scale for sigma^2")
    a_tau: float = Field(default=1.0, gt=0.0, description="IG shape for tau^2")
    b_tau: float = Field(default=1.0, gt=0.0, description="IG scale for tau^2")

    # Correlation model
    lambda_matrix: str = Field(
        default="identity", description="'identity' or path to the phi_D prior matrix"
    )
    gamma_matrix: str = Field(
        default="identity", description="'identity' or path to the phi_T prior matrix"
    )
    phi_grid_size: int = Field(default=201, ge=3, description="Griddy Gibbs grid points")
    distance: Literal["index", "raw"] = Field(
        default="index", description="AR(1) distance in grid positions or raw units"
    )
    replicate_mode: Literal["independent", "shared"] = Field(
        default="independent", description="Replicates as independent or shared-error copies"
    )
    clamp_sigma2: Optional[float] = Field(default=None, gt=0.0, description="Fix sigma^2")
    clamp_tau2: Optional[float] = Field(default=None, gt=0.0, description="Fix tau^2")
    clamp_phi_d: Optional[float] = Field(default=None, ge=0.0, lt=1.0, description="Fix phi_D")
    clamp_phi_t: Optional[float] = Field(default=None, ge=0.0, lt=1.0, description="Fix phi_T")

    # Splines
    order_d: int = Field(default=4, ge=1, le=6, description="Dose spline order (4 = cubic)")
    order_t: int = Field(default=4, ge=1, le=6, description="Time spline order")
    knots_d: str = Field(default="auto", description="'auto' or comma-separated dose knots")
    knots_t: str = Field(default="auto", description="'auto' or comma-separated time knots")
    eta: float = Field(default=1e-6, gt=0.0, description="Penalty corner lift")

    # Data and analytics
    control_label: str = Field(default="control", description="Particle label of control wells")
    level: float = Field(default=0.90, gt=0.0, lt=1.0, description="Predictive interval level")
    pd_grid_size: int = Field(default=50, ge=2, description="Partial dependence grid points")
    n_base: int = Field(default=512, ge=16, description="Latin hypercube base sample size")
    sens_mode: Literal["averaged", "per-point"] = Field(
        default="averaged", description="Sensitivity aggregation over the dose-time grid"
    )
    include_noise: bool = Field(default=False, description="Noise-attenuated sensitivity")
    loco_flag_margin: float = Field(
        default=0.2, ge=0.0, le=1.0, description="Flag folds with coverage below level - margin"
    )
    output_dir: Path = Field(default=Path("dosetree-out"), description="Output directory")

    model_config = SettingsConfigDict(
        env_prefix="DOSETREE_",
        extra="forbid",
        case_sensitive=False,
        validate_default=True,
    )

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        if self.burn_in >= self.iterations:
            raise ValueError(
                f"burn_in ({self.burn_in}) must be smaller than iterations ({self.iterations})"
            )
        total = self.move_grow + self.move_prune + self.move_change + self.move_swap
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f"move probabilities must sum to 1, got {total}")
        return self

    @property
    def move_probs(self) -> MoveProbs:
        return (self.move_grow, self.move_prune, self.move_change, self.move_swap)

    def knots(self, axis: Literal["d", "t"]) -> Optional[Tuple[float, ...]]:
        """Explicit interior knots for an axis, or None for one knot per interior grid point."""
        raw = self.knots_d if axis == "d" else self.knots_t
        if raw.strip().lower() == "auto":
            return None
        try:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        except ValueError as e:
            raise ConfigurationError(f"knots_{axis} must be 'auto' or numbers: {raw!r}") from e

    def correlation_priors(self, n_dose: int, n_time: int = 1) -> CorrelationPriorParams:
        """Resolve the phi priors for a dose grid (and time grid when n_time > 1)."""
        lam = _prior_matrix(self.lambda_matrix, n_dose, "lambda_matrix")
        gam = _prior_matrix(self.gamma_matrix, n_time, "gamma_matrix") if n_time > 1 else None
        return CorrelationPriorParams.from_matrices(lam, gam)

    def to_mcmc(self, n_dose: int, n_time: int = 1) -> McmcConfig:
        """Build the sampler configuration for a dataset with the given grid sizes."""
        try:
            return McmcConfig(
                iterations=self.iterations,
                burn_in=self.burn_in,
                thin=self.thin,
                move_probs=self.move_probs,
                tree_prior=TreePriorParams(alpha=self.alpha, nu=self.nu),
                variance_priors=VariancePriorParams(
                    a_sigma=self.a_sigma, b_sigma=self.b_sigma, a_tau=self.a_tau, b_tau=self.b_tau
                ),
                correlation_priors=self.correlation_priors(n_dose, n_time),
                eta=self.eta,
                seed=self.seed,
                n_chains=self.n_chains,
                n_jobs=self.n_jobs,
                tree_steps_per_sweep=self.tree_steps_per_sweep,
                checkpoint_every=self.checkpoint_every,
                phi_grid_size=self.phi_grid_size,
                distance=self.distance,
                replicate_mode=self.replicate_mode,
                clamp_sigma2=self.clamp_sigma2,
                clamp_tau2=self.clamp_tau2,
                clamp_phi_d=self.clamp_phi_d,
                clamp_phi_t=self.clamp_phi_t,
                debug=self.debug,
            )
        except ValidationError as e:
            raise ConfigurationError(_describe(e)) from e

    def to_flat(self) -> Dict[str, str]:
        """Flat string form, in field order, suitable for ``key=value`` files."""
        flat: Dict[str, str] = {}
        for key, value in self.model_dump().items():
            if value is None:
                flat[key] = ""
            elif isinstance(value, float):
                flat[key] = repr(value)
            elif isinstance(value, bool):
                flat[key] = "true" if value else "false"
            else:
                flat[key] = str(value)
        return flat


def _prior_matrix(spec: str, size: int, key: str) -> np.ndarray:
    if spec.strip().lower() == "identity":
        return np.eye(size)
    path = Path(spec)
    if not path.is_file():
        raise ConfigurationError(f"{key}: {spec!r} is neither 'identity' nor a readable file")
    matrix = np.loadtxt(path, ndmin=2)
    if matrix.shape != (size, size):
        raise ConfigurationError(f"{key}: expected a {size}x{size} matrix, got {matrix.shape}")
    return matrix


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        where = ".".join(str(p) for p in item.get("loc", ())) or "config"
        if item.get("type") == "extra_forbidden":
            parts.append(f"unknown key '{where}'")
        else:
            parts.append(f"{where}: {item.get('msg')}")
    return "; ".join(parts)


def parse_flat(text_or_path: Union[str, Path]) -> Dict[str, str]:
    """Read a flat ``key=value`` file (comments with ``#``) into lower-cased keys."""
    values = dotenv_values(Path(text_or_path))
    return {k.strip().lower(): (v if v is not None else "") for k, v in values.items()}


def load_config(path: Optional[Union[str, Path]] = None, **overrides: object) -> RunConfig:
    """Load a run configuration from a flat key-value file, env vars and overrides.

    Args:
        path: Config file; None means defaults plus environment
        **overrides: Values that win over the file (typically CLI flags)

    Returns:
        Validated RunConfig

    Raises:
        ConfigurationError: On unknown keys, bad values or inconsistent settings
    """
    values: Dict[str, object] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Config file not found: {path}")
        values.update({k: v for k, v in parse_flat(path).items() if v != ""})
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigurationError(_describe(e)) from e


def save_config(config: RunConfig, path: Union[str, Path]) -> None:
    """Write a RunConfig in the flat ``key=value`` format."""
    lines = [f"{key}={value}" for key, value in config.to_flat().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
