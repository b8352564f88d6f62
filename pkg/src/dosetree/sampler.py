"""MCMC over trees, leaf coefficients and variance components.

One sweep runs ``tree_steps_per_sweep`` Metropolis-Hastings tree proposals
with the leaf coefficients integrated out, then Gibbs updates of every leaf's
coefficients, sigma^2, tau^2, phi_D and (for dose x time data) phi_T.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from dosetree.basis import SplineSystem
from dosetree.config import McmcConfig, RunConfig
from dosetree.datastore import ExposureDataset
from dosetree.exceptions import ConfigurationError, NumericalError
from dosetree.likelihood import (
    LeafStats,
    NoiseModel,
    ParticleStats,
    cholesky,
    draw_beta_from_stats,
    draw_coefficient_prior,
    draw_phi,
    draw_sigma2,
    draw_tau2,
    log_inverse_gamma,
    log_marginal_from_stats,
    log_phi_prior,
    particle_stats,
    replicate_correlation,
)
from dosetree.tree import (
    MOVES,
    CovariateSpace,
    Move,
    Tree,
    log_tree_prior,
    propose_move,
    sample_tree_prior,
)

logger = logging.getLogger(__name__)

STATUSES = ("accepted", "rejected", "noop", "invalid", "failed")
DEBUG_CHECK_EVERY = 1000
DEBUG_TOLERANCE = 1e-6
# Settings a resumed chain may change without altering its draws
RESUME_FREE_SETTINGS = {"n_jobs", "checkpoint_every", "debug"}
SIGMA2_FLOOR = 1e-8


class ModelContext:
    """Training data prepared for the sampler.

    Holds the covariate space, the response copies ``(I, K, n_cells)``, the
    spline system and the distance convention, and caches the per-particle
    sufficient statistics for the most recent correlation parameters.
    """

    def __init__(
        self,
        covariates: np.ndarray,
        copies: np.ndarray,
        system: SplineSystem,
        distance: str = "index",
    ):
        self.space = CovariateSpace(covariates)
        copies = np.asarray(copies, dtype=float)
        if copies.ndim != 3 or copies.shape[0] != self.space.n_particles:
            raise ValueError(
                f"copies must be (n_particles, n_copies, n_cells), got {copies.shape}"
            )
        if copies.shape[2] != system.n_points:
            raise ValueError(
                f"copies have {copies.shape[2]} cells, the spline grid has {system.n_points}"
            )
        self.copies = copies
        self.system = system
        self.distance = distance
        self.design = system.design
        self.penalty = system.penalty
        self.logdet_penalty = 2.0 * float(np.sum(np.log(np.diag(cholesky(self.penalty)[0]))))
        self._stats_key: Optional[Tuple[float, float]] = None
        self._stats: Optional[ParticleStats] = None

    @classmethod
    def from_dataset(
        cls, dataset: ExposureDataset, system: SplineSystem, config: McmcConfig
    ) -> "ModelContext":
        """Build the context, collapsing replicates to their mean in shared mode."""
        copies = dataset.copies()
        if config.replicate_mode == "shared":
            counts = (~np.isnan(copies)).sum(axis=1, keepdims=True)
            totals = np.nansum(copies, axis=1, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                copies = np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)
        return cls(dataset.covariates, copies, system, config.distance)

    @property
    def n_particles(self) -> int:
        return self.space.n_particles

    @property
    def is_2d(self) -> bool:
        return self.system.is_2d

    @property
    def dose_positions(self) -> Optional[np.ndarray]:
        return self.system.dose_grid.values if self.distance == "raw" else None

    @property
    def time_positions(self) -> Optional[np.ndarray]:
        if self.distance != "raw" or self.system.time_grid is None:
            return None
        return self.system.time_grid.values

    @property
    def n_obs(self) -> int:
        return int((~np.isnan(self.copies)).sum())

    def correlation(self, noise: NoiseModel) -> np.ndarray:
        return replicate_correlation(
            self.system.n_dose,
            self.system.n_time,
            noise,
            self.dose_positions,
            self.time_positions,
        )

    def stats(self, noise: NoiseModel) -> ParticleStats:
        """Per-particle statistics for the correlation of ``noise`` (cached)."""
        key = (noise.phi_d, noise.phi_t)
        if self._stats is None or self._stats_key != key:
            self._stats = particle_stats(self.copies, self.design, self.correlation(noise))
            self._stats_key = key
        return self._stats

    def leaf_stats(self, tree: Tree, stats: ParticleStats) -> List[LeafStats]:
        return [stats.leaf(rows) for rows in self.space.leaf_rows(tree)]

    def integrated_log_likelihood(
        self, tree: Tree, noise: NoiseModel, tau2: float, stats: Optional[ParticleStats] = None
    ) -> float:
        """Sum over leaves of the log marginal likelihood."""
        stats = stats if stats is not None else self.stats(noise)
        return sum(
            log_marginal_from_stats(s, self.penalty, noise.sigma2, tau2, self.logdet_penalty)
            for s in self.leaf_stats(tree, stats)
        )

    def fitted(self, tree: Tree) -> np.ndarray:
        """Leaf mean profile of every particle, ``(I, n_cells)``."""
        coeffs = np.vstack([c for c in tree.leaf_coeffs])
        return (self.design @ coeffs.T).T[tree.route(self.space.X)]

    def residuals(self, tree: Tree) -> np.ndarray:
        """Residual copies ``(I * K, n_dose, n_time)``, ``NaN`` where unobserved."""
        res = self.copies - self.fitted(tree)[:, None, :]
        return res.reshape(-1, self.system.n_dose, self.system.n_time)


@dataclass(frozen=True)
class ChainState:
    """Tree (leaves carry coefficients), noise, tau^2 and the cached log posterior."""

    tree: Tree
    noise: NoiseModel
    tau2: float
    log_post: float = math.nan


@dataclass(frozen=True)
class StepOutcome:
    move: Move
    status: str

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"


def empty_acceptance() -> Dict[str, Dict[str, int]]:
    return {move.value: {status: 0 for status in STATUSES} for move in MOVES}


@dataclass
class PosteriorChain:
    """Stored draws of one chain plus its acceptance counts and log-posterior trace."""

    chain_id: int
    seed: int
    config: McmcConfig
    draws: List[ChainState] = field(default_factory=list)
    acceptance: Dict[str, Dict[str, int]] = field(default_factory=empty_acceptance)
    log_post_trace: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def n_draws(self) -> int:
        return len(self.draws)

    def scalar(self, name: str) -> np.ndarray:
        """Trace of ``sigma2``, ``tau2``, ``phi_d``, ``phi_t``, ``n_leaves`` or ``log_post``."""
        if name in ("sigma2", "phi_d", "phi_t"):
            return np.array([getattr(d.noise, name) for d in self.draws])
        if name == "tau2":
            return np.array([d.tau2 for d in self.draws])
        if name == "n_leaves":
            return np.array([d.tree.n_leaves for d in self.draws], dtype=float)
        if name == "log_post":
            return np.array([d.log_post for d in self.draws])
        raise KeyError(name)

    def record(self, outcome: StepOutcome) -> None:
        self.acceptance[outcome.move.value][outcome.status] += 1

    def proposed(self, move: str) -> int:
        return sum(self.acceptance[move].values())

    def acceptance_rate(self, move: str) -> float:
        proposed = self.proposed(move)
        return self.acceptance[move]["accepted"] / proposed if proposed else math.nan


@dataclass
class ChainCheckpoint:
    """A chain stopped after ``sweep`` sweeps, with its generator state.

    ``chain`` holds the draws and acceptance counts so far and the trace of the
    first ``sweep`` sweeps.
    """

    sweep: int
    state: ChainState
    rng_state: Dict[str, Any]
    chain: PosteriorChain

    @property
    def chain_id(self) -> int:
        return self.chain.chain_id

    def check_compatible(self, config: McmcConfig, chain_id: int) -> None:
        """Refuse to continue under settings that would change the draws.

        Raises:
            ConfigurationError: If the chain id or any sampling setting differs
        """
        if chain_id != self.chain_id:
            raise ConfigurationError(
                f"Checkpoint belongs to chain {self.chain_id}, not chain {chain_id}"
            )
        saved = self.chain.config.model_dump(exclude=RESUME_FREE_SETTINGS)
        wanted = config.model_dump(exclude=RESUME_FREE_SETTINGS)
        changed = sorted(k for k in wanted if saved.get(k) != wanted[k])
        if changed:
            raise ConfigurationError(
                f"Checkpoint of chain {chain_id} was written with other settings: "
                + ", ".join(changed)
            )
        if not 0 < self.sweep < config.iterations:
            raise ConfigurationError(
                f"Checkpoint of chain {chain_id} is at sweep {self.sweep}, "
                f"outside 1..{config.iterations - 1}"
            )


@dataclass
class PosteriorFit:
    """Everything analytics need: chains, training covariates and the spline system."""

    chains: List[PosteriorChain]
    system: SplineSystem
    covariates: np.ndarray
    covariate_names: Tuple[str, ...]
    particles: Tuple[str, ...]
    log_scale: Tuple[bool, ...] = ()
    distance: str = "index"
    settings: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.log_scale:
            self.log_scale = (False,) * len(self.covariate_names)

    @property
    def draws(self) -> List[ChainState]:
        """Draws of all chains, in chain order."""
        return [d for chain in self.chains for d in chain.draws]

    @property
    def n_covariates(self) -> int:
        return int(self.covariates.shape[1])

    def correlation(self, noise: NoiseModel) -> np.ndarray:
        raw = self.distance == "raw"
        return replicate_correlation(
            self.system.n_dose,
            self.system.n_time,
            noise,
            self.system.dose_grid.values if raw else None,
            self.system.time_grid.values if raw and self.system.time_grid is not None else None,
        )


def chain_seed(seed: int, chain_id: int, n_chains: int) -> np.random.SeedSequence:
    """Child ``chain_id`` of the master seed; independent of how many workers run."""
    return np.random.SeedSequence(seed).spawn(max(n_chains, chain_id + 1))[chain_id]


def log_posterior_components(
    state: ChainState,
    context: ModelContext,
    config: McmcConfig,
    stats: Optional[ParticleStats] = None,
) -> Dict[str, float]:
    """Log joint density of the state and the data, split by component.

    The correlation prior terms are unnormalized.
    """
    noise, tau2, tree = state.noise, state.tau2, state.tree
    stats = stats if stats is not None else context.stats(noise)
    priors = config.variance_priors
    n_coef = context.penalty.shape[0]
    leaf_stats = context.leaf_stats(tree, stats)
    likelihood = 0.0
    beta_prior = 0.0
    for s, beta in zip(leaf_stats, tree.leaf_coeffs):
        assert beta is not None
        likelihood -= 0.5 * (
            s.n_obs * math.log(2 * math.pi * noise.sigma2)
            + s.logdet_r
            + s.residual_quadratic(beta) / noise.sigma2
        )
        beta_prior -= 0.5 * (
            n_coef * math.log(2 * math.pi * tau2)
            - context.logdet_penalty
            + float(beta @ context.penalty @ beta) / tau2
        )
    n_d, n_t = context.system.n_dose, context.system.n_time
    components = {
        "likelihood": likelihood,
        "coefficients": beta_prior,
        "tree": log_tree_prior(tree, context.space, config.tree_prior),
        "sigma2": log_inverse_gamma(noise.sigma2, priors.a_sigma, priors.b_sigma),
        "tau2": log_inverse_gamma(tau2, priors.a_tau, priors.b_tau),
    }
    with np.errstate(divide="ignore"):
        components["phi_d"] = float(
            log_phi_prior(np.array([noise.phi_d]), "dose", n_d, n_t, config.correlation_priors)[0]
        )
        if context.is_2d:
            components["phi_t"] = float(
                log_phi_prior(
                    np.array([noise.phi_t]), "time", n_d, n_t, config.correlation_priors
                )[0]
            )
    return components


def log_posterior(
    state: ChainState,
    context: ModelContext,
    config: McmcConfig,
    stats: Optional[ParticleStats] = None,
) -> float:
    return float(sum(log_posterior_components(state, context, config, stats).values()))


def _moment_sigma2(copies: np.ndarray) -> float:
    """Method-of-moments sigma^2 from the spread of replicates around their cell means."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        counts = (~np.isnan(copies)).sum(axis=1)
        if np.any(counts >= 2):
            spread = np.nanvar(copies, axis=1, ddof=1)[counts >= 2]
            return float(np.nanmean(spread))
        observed = copies[~np.isnan(copies)]
        return float(np.var(observed, ddof=1)) if observed.size > 1 else math.nan


def initialize_state(
    context: ModelContext,
    config: McmcConfig,
    rng: np.random.Generator,
    overdisperse: bool = False,
) -> ChainState:
    """Starting state: a stump with prior-drawn coefficients and moment-based sigma^2.

    Overdispersed starts (used for chains after the first) draw the tree from
    its prior, scale sigma^2 by a lognormal factor and draw the correlations
    uniformly on [0.1, 0.9].

    Raises:
        NumericalError: If a component of the initial log posterior is not finite
    """
    priors = config.variance_priors
    tau2 = config.clamp_tau2 or priors.b_tau / (priors.a_tau + 1.0)

    sigma2 = _moment_sigma2(context.copies)
    if not math.isfinite(sigma2) or sigma2 < SIGMA2_FLOOR:
        logger.warning(
            "Replicate variance is %s; starting sigma2 at the floor %g", sigma2, SIGMA2_FLOOR
        )
        sigma2 = SIGMA2_FLOOR
    phi_d = phi_t = 0.5
    tree = Tree.stump()
    if overdisperse:
        tree = sample_tree_prior(context.space, config.tree_prior, rng)
        sigma2 *= float(np.exp(rng.normal()))
        phi_d = float(rng.uniform(0.1, 0.9))
        phi_t = float(rng.uniform(0.1, 0.9))
    sigma2 = config.clamp_sigma2 or sigma2
    phi_d = config.clamp_phi_d if config.clamp_phi_d is not None else phi_d
    phi_t = config.clamp_phi_t if config.clamp_phi_t is not None else phi_t
    if not context.is_2d:
        phi_t = 0.0

    coeffs = [draw_coefficient_prior(context.penalty, tau2, rng) for _ in range(tree.n_leaves)]
    state = ChainState(tree.with_leaf_coeffs(coeffs), NoiseModel(sigma2, phi_d, phi_t), tau2)

    components = log_posterior_components(state, context, config)
    bad = [name for name, value in components.items() if not math.isfinite(value)]
    if bad:
        raise NumericalError(f"Initial log posterior is not finite in: {', '.join(bad)}")
    return ChainState(state.tree, state.noise, tau2, float(sum(components.values())))


def mh_tree_step(
    state: ChainState, context: ModelContext, config: McmcConfig, rng: np.random.Generator
) -> Tuple[ChainState, StepOutcome]:
    """One Metropolis-Hastings tree proposal with the coefficients integrated out.

    On acceptance every leaf of the new tree gets coefficients drawn from its
    full conditional. Numerical failures reject the proposal.
    """
    proposal = propose_move(state.tree, context.space, config.move_probs, config.tree_prior, rng)
    if not proposal.is_candidate or proposal.tree is None:
        return state, StepOutcome(proposal.move, proposal.status)

    noise, tau2 = state.noise, state.tau2
    stats = context.stats(noise)
    try:
        current = context.integrated_log_likelihood(state.tree, noise, tau2, stats)
        candidate = context.integrated_log_likelihood(proposal.tree, noise, tau2, stats)
    except NumericalError as e:
        logger.debug("Rejecting %s proposal: %s", proposal.move.value, e)
        return state, StepOutcome(proposal.move, "failed")

    log_accept = candidate - current + proposal.log_ratio
    if not math.log1p(-rng.random()) < log_accept:
        return state, StepOutcome(proposal.move, "rejected")

    coeffs = [
        draw_beta_from_stats(s, context.penalty, noise.sigma2, tau2, rng)
        for s in context.leaf_stats(proposal.tree, stats)
    ]
    return (
        ChainState(proposal.tree.with_leaf_coeffs(coeffs), noise, tau2, state.log_post),
        StepOutcome(proposal.move, "accepted"),
    )


def gibbs_sweep(
    state: ChainState, context: ModelContext, config: McmcConfig, rng: np.random.Generator
) -> Tuple[ChainState, List[StepOutcome]]:
    """Tree step(s), then coefficients, sigma^2, tau^2 and the correlations.

    Clamped components stay fixed.
    """
    outcomes = []
    for _ in range(config.tree_steps_per_sweep):
        state, outcome = mh_tree_step(state, context, config, rng)
        outcomes.append(outcome)

    tree, noise, tau2 = state.tree, state.noise, state.tau2
    stats = context.stats(noise)
    leaf_stats = context.leaf_stats(tree, stats)
    coeffs = [
        draw_beta_from_stats(s, context.penalty, noise.sigma2, tau2, rng) for s in leaf_stats
    ]
    tree = tree.with_leaf_coeffs(coeffs)

    if config.clamp_sigma2 is None:
        quad = sum(s.residual_quadratic(b) for s, b in zip(leaf_stats, coeffs))
        n_obs = sum(s.n_obs for s in leaf_stats)
        noise = noise.with_values(sigma2=draw_sigma2(quad, n_obs, config.variance_priors, rng))
    if config.clamp_tau2 is None:
        tau2 = draw_tau2(coeffs, context.penalty, config.variance_priors, rng)

    if config.clamp_phi_d is None or (context.is_2d and config.clamp_phi_t is None):
        residuals = context.residuals(tree)
        if config.clamp_phi_d is None:
            phi_d = draw_phi(
                "dose", residuals, noise, config.correlation_priors, rng,
                config.phi_grid_size, context.dose_positions, context.time_positions,
            )
            noise = noise.with_values(phi_d=phi_d)
        if context.is_2d and config.clamp_phi_t is None:
            phi_t = draw_phi(
                "time", residuals, noise, config.correlation_priors, rng,
                config.phi_grid_size, context.dose_positions, context.time_positions,
            )
            noise = noise.with_values(phi_t=phi_t)

    new_state = ChainState(tree, noise, tau2)
    return (
        ChainState(tree, noise, tau2, log_posterior(new_state, context, config)),
        outcomes,
    )


def check_log_post(state: ChainState, context: ModelContext, config: McmcConfig) -> None:
    """Compare the cached log posterior against statistics rebuilt from the raw data.

    Raises:
        NumericalError: If they differ by more than the debug tolerance
    """
    fresh = particle_stats(context.copies, context.design, context.correlation(state.noise))
    recomputed = log_posterior(state, context, config, fresh)
    if abs(recomputed - state.log_post) > DEBUG_TOLERANCE * max(1.0, abs(recomputed)):
        raise NumericalError(
            f"Cached log posterior {state.log_post!r} differs from recomputed {recomputed!r}"
        )


def _checkpoint_due(sweep: int, config: McmcConfig) -> bool:
    every = config.checkpoint_every
    return every > 0 and sweep % every == 0 and sweep < config.iterations


def run_chain(
    context: ModelContext,
    config: McmcConfig,
    chain_id: int = 0,
    progress: Optional[Callable[[int], None]] = None,
    checkpoint: Optional[Callable[[ChainCheckpoint], None]] = None,
    resume: Optional[ChainCheckpoint] = None,
) -> PosteriorChain:
    """Run one chain; reproducible given ``config.seed`` and ``chain_id``.

    Draws after burn-in are kept every ``thin`` sweeps and acceptance counts
    cover post-burn-in proposals only. The log-posterior trace covers every
    sweep.

    With ``checkpoint`` set, the chain is handed to it every
    ``config.checkpoint_every`` sweeps. A chain continued from ``resume``
    produces the same draws as one that never stopped.
    """
    rng = np.random.default_rng(chain_seed(config.seed, chain_id, config.n_chains))
    trace = np.empty(config.iterations)
    if resume is None:
        start = 0
        state = initialize_state(context, config, rng, overdisperse=chain_id > 0)
        chain = PosteriorChain(chain_id=chain_id, seed=config.seed, config=config)
    else:
        resume.check_compatible(config, chain_id)
        start = resume.sweep
        state = resume.state
        rng.bit_generator.state = resume.rng_state
        chain = PosteriorChain(
            chain_id=chain_id,
            seed=config.seed,
            config=config,
            draws=list(resume.chain.draws),
            acceptance={m: dict(s) for m, s in resume.chain.acceptance.items()},
        )
        trace[:start] = resume.chain.log_post_trace[:start]
        logger.info("Chain %d: resuming after sweep %d", chain_id, start)
    for t in range(start + 1, config.iterations + 1):
        state, outcomes = gibbs_sweep(state, context, config, rng)
        trace[t - 1] = state.log_post
        if t > config.burn_in:
            for outcome in outcomes:
                chain.record(outcome)
            if (t - config.burn_in) % config.thin == 0:
                chain.draws.append(state)
        if config.debug and t % DEBUG_CHECK_EVERY == 0:
            check_log_post(state, context, config)
        if checkpoint is not None and _checkpoint_due(t, config):
            chain.log_post_trace = trace[:t]
            checkpoint(ChainCheckpoint(t, state, rng.bit_generator.state, chain))
        if progress is not None:
            progress(t)
    chain.log_post_trace = trace
    logger.info(
        "Chain %d: %d draws, change acceptance %.3f",
        chain_id,
        chain.n_draws,
        chain.acceptance_rate(Move.CHANGE.value),
    )
    return chain


def run_chains(
    context: ModelContext,
    config: McmcConfig,
    progress: Optional[Callable[[int, int], None]] = None,
    checkpoint: Optional[Callable[[ChainCheckpoint], None]] = None,
    resume: Optional[Dict[int, ChainCheckpoint]] = None,
) -> List[PosteriorChain]:
    """Run ``config.n_chains`` chains, in parallel when ``n_jobs`` allows.

    Results come back in chain order whatever the number of workers. Chains
    with an entry in ``resume`` continue from it; the others start afresh.
    ``checkpoint`` must be picklable when chains run in parallel.
    """
    resume = resume or {}
    if config.n_jobs == 1 or config.n_chains == 1:
        return [
            run_chain(
                context,
                config,
                c,
                None if progress is None else (lambda t, c=c: progress(c, t)),
                checkpoint,
                resume.get(c),
            )
            for c in range(config.n_chains)
        ]
    return list(
        Parallel(n_jobs=config.n_jobs)(
            delayed(run_chain)(context, config, c, None, checkpoint, resume.get(c))
            for c in range(config.n_chains)
        )
    )


def combine_fit(
    chains: Sequence[PosteriorChain], dataset: ExposureDataset, system: SplineSystem,
    settings: Optional[Dict[str, str]] = None, distance: str = "index",
) -> PosteriorFit:
    """Bundle finished chains with the training data needed by analytics."""
    return PosteriorFit(
        chains=list(chains),
        system=system,
        covariates=dataset.covariates,
        covariate_names=dataset.covariate_names,
        particles=dataset.particles,
        log_scale=dataset.log_scale,
        distance=distance,
        settings=dict(settings or {}),
    )


def build_system(dataset: ExposureDataset, config: RunConfig) -> SplineSystem:
    """Spline system on the dataset's grids with the configured orders and knots."""
    return SplineSystem.build(
        dataset.dose_grid,
        dataset.time_grid,
        order_d=config.order_d,
        order_t=config.order_t,
        knots_d=config.knots("d"),
        knots_t=config.knots("t"),
        eta=config.eta,
    )


def fit_dataset(
    dataset: ExposureDataset,
    config: RunConfig,
    progress: Optional[Callable[[int, int], None]] = None,
    seed: Optional[int] = None,
    n_jobs: Optional[int] = None,
    checkpoint: Optional[Callable[[ChainCheckpoint], None]] = None,
    resume: Optional[Dict[int, ChainCheckpoint]] = None,
) -> PosteriorFit:
    """Build the model for a dataset, run every chain and bundle the result.

    Args:
        dataset: Training data (normalized or not, as the caller decides)
        config: Run configuration
        progress: Called with ``(chain_id, iteration)`` when chains run serially
        seed: Overrides ``config.seed``
        n_jobs: Overrides ``config.n_jobs``
        checkpoint: Receives each chain's state every ``checkpoint_every`` sweeps
        resume: Saved chain states to continue from, by chain id
    """
    system = build_system(dataset, config)
    mcmc = config.to_mcmc(system.n_dose, system.n_time)
    updates: Dict[str, int] = {}
    if seed is not None:
        updates["seed"] = seed
    if n_jobs is not None:
        updates["n_jobs"] = n_jobs
    if updates:
        mcmc = mcmc.model_copy(update=updates)
    context = ModelContext.from_dataset(dataset, system, mcmc)
    chains = run_chains(context, mcmc, progress, checkpoint, resume)
    return combine_fit(chains, dataset, system, config.to_flat(), config.distance)
