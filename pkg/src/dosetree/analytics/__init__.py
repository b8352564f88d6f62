"""Posterior summaries computed from a finished fit."""

from dosetree.analytics.dependence import (
    PartialDependence,
    covariate_grid,
    partial_dependence,
    partial_dependence_2var,
)
from dosetree.analytics.predictive import (
    PredictiveSummary,
    posterior_predictive,
    posterior_predictive_check,
)
from dosetree.analytics.sensitivity import SensitivityReport, saltelli_indices, sensitivity_indices
from dosetree.analytics.simulate import (
    GroundTruth,
    SimulationResult,
    SimulationSpec,
    load_simulation_spec,
    simulate_dataset,
)
from dosetree.analytics.validation import LocoResult, loco_validation

__all__ = [
    "GroundTruth",
    "LocoResult",
    "PartialDependence",
    "PredictiveSummary",
    "SensitivityReport",
    "SimulationResult",
    "SimulationSpec",
    "covariate_grid",
    "load_simulation_spec",
    "loco_validation",
    "partial_dependence",
    "partial_dependence_2var",
    "posterior_predictive",
    "posterior_predictive_check",
    "saltelli_indices",
    "sensitivity_indices",
    "simulate_dataset",
]
