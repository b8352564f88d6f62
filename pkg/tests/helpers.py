"""Builders shared by the analytics and storage tests."""

from typing import List, Sequence

import numpy as np

from dosetree.basis import SplineSystem
from dosetree.config import RunConfig
from dosetree.likelihood import NoiseModel
from dosetree.sampler import ChainState, PosteriorChain, PosteriorFit
from dosetree.tree import Node, SplitRule, Tree


def make_fit(
    system: SplineSystem,
    covariates: np.ndarray,
    trees: Sequence[Tree],
    sigma2: float = 0.05,
    names: Sequence[str] = (),
) -> PosteriorFit:
    """Fit holding one chain whose draws are the given coefficient-carrying trees."""
    mcmc = RunConfig(iterations=len(trees) + 1, burn_in=1, thin=1).to_mcmc(
        system.n_dose, system.n_time
    )
    chain = PosteriorChain(chain_id=0, seed=0, config=mcmc)
    noise = NoiseModel(sigma2, 0.3, 0.2 if system.is_2d else 0.0)
    chain.draws = [ChainState(tree, noise, 1.0, -1.0) for tree in trees]
    chain.log_post_trace = np.full(len(trees) + 1, -1.0)
    p = covariates.shape[1]
    return PosteriorFit(
        chains=[chain],
        system=system,
        covariates=covariates,
        covariate_names=tuple(names) or tuple(f"x{j + 1}" for j in range(p)),
        particles=tuple(f"P{i + 1}" for i in range(covariates.shape[0])),
    )


def split_tree(var: int, threshold: float, left: np.ndarray, right: np.ndarray) -> Tree:
    """One split with the given leaf coefficients."""
    return Tree(
        Node(rule=SplitRule(var, threshold), left=Node(coeffs=left), right=Node(coeffs=right))
    )


def constant_coeffs(system: SplineSystem, level: float) -> np.ndarray:
    """Coefficients of the flat curve at ``level`` (B-splines sum to one)."""
    return np.full(system.n_coefficients, level)
