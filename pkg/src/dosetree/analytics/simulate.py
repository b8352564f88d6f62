"""Synthetic exposure datasets drawn from the tree + spline + AR(1) model.

A :class:`SimulationSpec` names the design (particles, replicates, grids,
covariates), the generating mean (a balanced tree over ``split_vars`` with
sigmoid or random-walk spline leaf curves, or an additive function of the
covariates) and the noise. Trays add a per-(tray, time) baseline that the
control wells measure, so normalized data follow the model exactly.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from dosetree.basis import Grid1D, SplineSystem
from dosetree.config import parse_flat
from dosetree.datastore import ExposureDataset
from dosetree.exceptions import DatasetError, SimulationError, SplineError
from dosetree.likelihood import NoiseModel, cholesky, draw_coefficient_prior, replicate_correlation
from dosetree.tree import Node, SplitRule, Tree

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Preset = Literal["default", "pi", "isolated", "additive"]

SPLIT_POINT = 0.5
ISOLATED_VALUE = 3.0
ISOLATED_SPLIT = 2.0
HILL_EXPONENT = 1.5

PRESETS: Dict[str, Dict[str, Any]] = {
    "default": {},
    "pi": {"n_times": 6},
    "isolated": {"isolated": True},
    "additive": {"generator": "additive"},
}


def _int_list(raw: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in raw.split(",") if v.strip())


def _float_list(raw: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in raw.split(",") if v.strip())


class SimulationSpec(BaseModel):
    """Generator settings; every field has a flat ``key=value`` spelling."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    preset: Preset = "default"
    seed: int = Field(default=0, ge=0)

    n_particles: int = Field(default=24, ge=3)
    n_replicates: int = Field(default=4, ge=1)
    n_doses: int = Field(default=11, ge=3)
    min_dose: float = Field(default=0.1, gt=0.0)
    max_dose: float = Field(default=100.0, gt=0.0)
    n_times: int = Field(default=1, ge=1, description="1 gives dose-only data")
    max_time: float = Field(default=24.0, gt=0.0)
    n_covariates: int = Field(default=6, ge=1)
    log_vars: str = Field(default="", description="Covariates generated and flagged on log scale")

    generator: Literal["tree", "additive"] = "tree"
    split_vars: str = Field(default="0,1", description="Covariates the generating tree splits on")
    leaf_family: Literal["sigmoid", "spline"] = "sigmoid"
    amplitude: float = Field(default=2.0, gt=0.0)
    tau2: float = Field(default=1.0, gt=0.0, description="Prior scale of spline leaf curves")
    additive_weights: str = Field(default="2,1", description="Weights of the additive generator")
    isolated: bool = Field(default=False, description="Add one extreme particle with its own curve")

    sigma2: float = Field(default=0.04, ge=0.0)
    phi_d: float = Field(default=0.6, ge=0.0, lt=1.0)
    phi_t: float = Field(default=0.5, ge=0.0, lt=1.0)

    n_trays: int = Field(default=2, ge=0, description="0 gives data without trays or controls")
    baseline_mean: float = 1.0
    baseline_sd: float = Field(default=0.2, ge=0.0)
    control_sigma2: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def _check_consistency(self) -> "SimulationSpec":
        if self.max_dose <= self.min_dose:
            raise ValueError("max_dose must exceed min_dose")
        p = self.n_covariates
        for key, values in (
            ("split_vars", self.split_indices),
            ("log_vars", self.log_indices),
        ):
            if any(v < 0 or v >= p for v in values):
                raise ValueError(f"{key} must index covariates 0..{p - 1}")
            if len(set(values)) != len(values):
                raise ValueError(f"{key} has repeated entries")
        if self.generator == "tree" and not self.split_indices:
            raise ValueError("a tree generator needs at least one split variable")
        if len(self.weights) > p:
            raise ValueError("more additive weights than covariates")
        if self.generator == "additive" and not any(self.weights):
            raise ValueError("additive weights must not all be zero")
        if self.isolated and self.generator != "tree":
            raise ValueError("isolated particles need a tree generator")
        return self

    @property
    def split_indices(self) -> Tuple[int, ...]:
        return _int_list(self.split_vars)

    @property
    def log_indices(self) -> Tuple[int, ...]:
        return _int_list(self.log_vars)

    @property
    def weights(self) -> Tuple[float, ...]:
        return _float_list(self.additive_weights)

    @classmethod
    def from_preset(cls, preset: str = "default", **overrides: Any) -> "SimulationSpec":
        """Preset values overlaid by explicit settings.

        Raises:
            SimulationError: If the preset is unknown or the result is invalid
        """
        if preset not in PRESETS:
            raise SimulationError(f"Unknown preset '{preset}'; choose from {', '.join(PRESETS)}")
        values: Dict[str, Any] = {**PRESETS[preset], **overrides, "preset": preset}
        try:
            return cls.model_validate(values)
        except ValidationError as e:
            raise SimulationError(_describe(e)) from e

    def to_flat(self) -> Dict[str, str]:
        flat: Dict[str, str] = {}
        for key, value in self.model_dump().items():
            if isinstance(value, bool):
                flat[key] = "true" if value else "false"
            elif isinstance(value, float):
                flat[key] = repr(value)
            else:
                flat[key] = str(value)
        return flat


def _describe(error: ValidationError) -> str:
    problems = []
    for item in error.errors():
        where = ".".join(str(part) for part in item["loc"])
        if item["type"] == "extra_forbidden":
            problems.append(f"unknown key '{where}'")
        else:
            problems.append(f"{where}: {item['msg']}" if where else item["msg"])
    return "Invalid simulation spec: " + "; ".join(problems)


def load_simulation_spec(path: Optional[PathLike] = None, **overrides: Any) -> SimulationSpec:
    """Read a flat ``key=value`` spec file; ``preset`` selects the base values.

    Raises:
        SimulationError: If the file is missing or the spec is invalid
    """
    values: Dict[str, Any] = {}
    if path is not None:
        if not Path(path).is_file():
            raise SimulationError(f"Simulation spec not found: {path}")
        values = {k: v for k, v in parse_flat(path).items() if v != ""}
    values.update({k: v for k, v in overrides.items() if v is not None})
    preset = str(values.pop("preset", "default"))
    return SimulationSpec.from_preset(preset, **values)


@dataclass(frozen=True)
class GroundTruth:
    """Generating structure and parameters of a simulated dataset."""

    spec: SimulationSpec
    tree: Optional[Tree]
    leaf_curves: Optional[np.ndarray]
    leaf_of: Optional[np.ndarray]
    means: np.ndarray
    noise: Tuple[float, float, float]
    baselines: Optional[np.ndarray]
    isolated_particle: Optional[str] = None

    @property
    def split_variables(self) -> Tuple[int, ...]:
        return tuple(sorted(set(self.tree.split_variables()))) if self.tree is not None else ()

    def first_order(self) -> Optional[np.ndarray]:
        """Analytic first-order indices of the additive generator, uniform covariates."""
        if self.spec.generator != "additive":
            return None
        weights = np.zeros(self.spec.n_covariates)
        given = np.asarray(self.spec.weights)
        weights[: given.size] = given
        return weights**2 / float(np.sum(weights**2))


@dataclass(frozen=True)
class SimulationResult:
    dataset: ExposureDataset
    truth: GroundTruth

    def write_truth(self, out_dir: PathLike) -> List[Path]:
        """Write ``truth.cfg``, ``truth_means.csv`` and (tree generators) ``truth_tree.txt``."""
        target = Path(out_dir)
        target.mkdir(parents=True, exist_ok=True)
        truth = self.truth
        facts = truth.spec.to_flat()
        sigma2, phi_d, phi_t = truth.noise
        facts.update(
            true_sigma2=repr(sigma2),
            true_phi_d=repr(phi_d),
            true_phi_t=repr(phi_t),
            true_split_vars=",".join(str(v) for v in truth.split_variables),
            isolated_particle=truth.isolated_particle or "",
        )
        first_order = truth.first_order()
        if first_order is not None:
            facts["true_first_order"] = ",".join(repr(float(v)) for v in first_order)
        written = [target / "truth.cfg"]
        written[0].write_text("".join(f"{k}={v}\n" for k, v in facts.items()), encoding="utf-8")

        dataset = self.dataset
        dose, time = _cell_coordinates(dataset)
        frame = pd.DataFrame(
            {
                "particle": np.repeat(dataset.particles, dose.size),
                "dose": np.tile(dose, dataset.n_particles),
                "time": np.tile(time, dataset.n_particles),
                "mean": truth.means.ravel(),
            }
        )
        if truth.leaf_of is not None:
            frame["leaf"] = np.repeat(truth.leaf_of, dose.size)
        written.append(target / "truth_means.csv")
        frame.to_csv(written[-1], index=False, float_format=lambda v: repr(float(v)))
        if truth.tree is not None:
            written.append(target / "truth_tree.txt")
            written[-1].write_text(truth.tree.to_text() + "\n", encoding="utf-8")
        return written


def _cell_coordinates(dataset: ExposureDataset) -> Tuple[np.ndarray, np.ndarray]:
    times = np.zeros(1) if dataset.time_grid is None else dataset.time_grid.values
    dose, time = np.meshgrid(dataset.dose_grid.values, times, indexing="ij")
    return dose.ravel(), time.ravel()


def _grids(spec: SimulationSpec) -> Tuple[Grid1D, Optional[Grid1D]]:
    doses = np.concatenate([[0.0], np.geomspace(spec.min_dose, spec.max_dose, spec.n_doses - 1)])
    if spec.n_times == 1:
        return Grid1D(doses), None
    times = np.linspace(spec.max_time / spec.n_times, spec.max_time, spec.n_times)
    return Grid1D(doses), Grid1D(times)


def _to_scale(spec: SimulationSpec, j: int, u: np.ndarray) -> np.ndarray:
    """Map unit-interval values of covariate ``j`` to its generated scale."""
    return 10.0 ** (4.0 * u - 2.0) if j in spec.log_indices else u


def _balanced(spec: SimulationSpec, level: int = 0) -> Node:
    if level == len(spec.split_indices):
        return Node()
    j = spec.split_indices[level]
    threshold = float(_to_scale(spec, j, np.array(SPLIT_POINT)))
    return Node(
        rule=SplitRule(j, threshold),
        left=_balanced(spec, level + 1),
        right=_balanced(spec, level + 1),
    )


def _generating_tree(spec: SimulationSpec) -> Tree:
    root = _balanced(spec)
    if spec.isolated:
        j = spec.split_indices[0]
        threshold = float(_to_scale(spec, j, np.array(ISOLATED_SPLIT)))
        root = Node(rule=SplitRule(j, threshold), left=root, right=Node())
    return Tree(root)


def _hill(dose: np.ndarray, ec50: float) -> np.ndarray:
    return dose**HILL_EXPONENT / (dose**HILL_EXPONENT + ec50**HILL_EXPONENT)


def _time_factor(spec: SimulationSpec, time: np.ndarray) -> np.ndarray:
    if spec.n_times == 1:
        return np.ones_like(time)
    return 1.0 - np.exp(-3.0 * time / spec.max_time)


def _sigmoid_curves(
    spec: SimulationSpec, n_leaves: int, dose: np.ndarray, time: np.ndarray
) -> np.ndarray:
    """Hill curves with leaf-specific plateau and EC50, damped early in time."""
    middle = math.sqrt(spec.min_dose * spec.max_dose)
    n_regular = n_leaves - 1 if spec.isolated else n_leaves
    curves = []
    for leaf in range(n_regular):
        top = spec.amplitude * (leaf + 1) / n_regular
        ec50 = middle * 4.0 ** ((leaf % 3) - 1)
        curves.append(top * _hill(dose, ec50) * _time_factor(spec, time))
    if spec.isolated:
        drop = _hill(dose, 2.0 * spec.min_dose) * _time_factor(spec, time)
        curves.append(-1.5 * spec.amplitude * drop)
    return np.vstack(curves)


def simulate_dataset(
    spec: SimulationSpec, rng: Optional[np.random.Generator] = None
) -> SimulationResult:
    """Draw a dataset and its ground truth from ``spec``.

    Every replicate profile is its particle's mean plus an independent error
    profile with covariance ``sigma2 * ar1(phi_d) kron ar1(phi_t)``; with
    ``sigma2 = 0`` replicates are identical.

    Raises:
        SimulationError: If the spec cannot produce a valid dataset
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    try:
        dose_grid, time_grid = _grids(spec)
    except SplineError as e:
        raise SimulationError(f"Invalid grids: {e}") from e
    n_time = 1 if time_grid is None else time_grid.n
    I, K, p = spec.n_particles, spec.n_replicates, spec.n_covariates

    unit = rng.uniform(0.0, 1.0, size=(I, p))
    isolated_particle = None
    if spec.isolated:
        unit[-1, spec.split_indices[0]] = ISOLATED_VALUE
    X = np.column_stack([_to_scale(spec, j, unit[:, j]) for j in range(p)])
    particles = tuple(f"P{i + 1:02d}" for i in range(I))
    if spec.isolated:
        isolated_particle = particles[-1]

    dose = np.repeat(dose_grid.values, n_time)
    time = np.tile(np.zeros(1) if time_grid is None else time_grid.values, dose_grid.n)

    tree: Optional[Tree] = None
    curves: Optional[np.ndarray] = None
    leaf_of: Optional[np.ndarray] = None
    if spec.generator == "additive":
        weights = np.zeros(p)
        weights[: len(spec.weights)] = spec.weights
        shape = _hill(dose, math.sqrt(spec.min_dose * spec.max_dose)) * _time_factor(spec, time)
        means = (unit @ weights)[:, None] * shape[None, :]
    else:
        tree = _generating_tree(spec)
        if spec.leaf_family == "spline":
            system = SplineSystem.build(dose_grid, time_grid)
            coeffs = [
                draw_coefficient_prior(system.penalty, spec.tau2, rng) for _ in range(tree.n_leaves)
            ]
            tree = tree.with_leaf_coeffs(coeffs)
            curves = np.vstack(coeffs) @ system.design.T
        else:
            curves = _sigmoid_curves(spec, tree.n_leaves, dose, time)
        leaf_of = tree.route(X)
        means = curves[leaf_of]
        empty = sorted(set(range(tree.n_leaves)) - set(leaf_of.tolist()))
        if empty:
            logger.warning("Generating leaves %s received no particles", empty)

    n_cells = dose.size
    responses = np.repeat(means[:, None, :], K, axis=1)
    if spec.sigma2 > 0:
        correlation = replicate_correlation(
            dose_grid.n,
            n_time,
            NoiseModel(1.0, spec.phi_d, spec.phi_t if time_grid is not None else 0.0),
        )
        lower = np.tril(cholesky(correlation, "replicate correlation")[0])
        errors = rng.standard_normal((I, K, n_cells)) @ lower.T
        responses = responses + math.sqrt(spec.sigma2) * errors

    trays = None
    controls = None
    baselines = None
    if spec.n_trays > 0:
        tray_names = [f"T{t + 1}" for t in range(spec.n_trays)]
        shifts = rng.standard_normal((spec.n_trays, n_time))
        baselines = spec.baseline_mean + spec.baseline_sd * shifts
        tray_of = np.arange(K) % spec.n_trays
        trays = np.array([[tray_names[t] for t in tray_of]] * I, dtype=object)
        responses = responses + np.tile(baselines[tray_of], (1, dose_grid.n))[None, :, :]
        rows = []
        times = np.zeros(1) if time_grid is None else time_grid.values
        for t, name in enumerate(tray_names):
            for k in range(K):
                for v, when in enumerate(times):
                    noise = math.sqrt(spec.control_sigma2) * rng.standard_normal()
                    rows.append(
                        {"replicate": f"c{k + 1}", "dose": 0.0, "time": float(when),
                         "response": float(baselines[t, v] + noise), "tray": name}
                    )
        controls = pd.DataFrame(rows)

    try:
        dataset = ExposureDataset(
            particles=particles,
            covariate_names=tuple(f"x{j + 1}" for j in range(p)),
            covariates=X,
            dose_grid=dose_grid,
            time_grid=time_grid,
            responses=responses.reshape(I, K, dose_grid.n, n_time),
            log_scale=tuple(j in spec.log_indices for j in range(p)),
            replicates=tuple(str(k + 1) for k in range(K)),
            trays=trays,
            controls=controls,
        )
    except DatasetError as e:
        raise SimulationError(f"Simulated data are invalid: {e}") from e
    truth = GroundTruth(
        spec=spec,
        tree=tree,
        leaf_curves=curves,
        leaf_of=leaf_of,
        means=means,
        noise=(spec.sigma2, spec.phi_d, spec.phi_t if time_grid is not None else 0.0),
        baselines=baselines,
        isolated_particle=isolated_particle,
    )
    logger.info(
        "Simulated %d particles x %d replicates on %d doses x %d times (%s generator)",
        I, K, dose_grid.n, n_time, spec.generator,
    )
    return SimulationResult(dataset=dataset, truth=truth)
