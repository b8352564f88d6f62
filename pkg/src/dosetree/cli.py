"""Main CLI application."""

import traceback
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
import typer
from pydantic import ValidationError

from dosetree.__version__ import __version__
from dosetree.analytics import (
    load_simulation_spec,
    loco_validation,
    partial_dependence,
    partial_dependence_2var,
    posterior_predictive,
    posterior_predictive_check,
    sensitivity_indices,
    simulate_dataset,
)
from dosetree.analytics.dependence import covariate_grid
from dosetree.analytics.predictive import PredictiveSummary, check_grids, summaries_frame
from dosetree.chain_store import CheckpointStore, dataset_fingerprint, load_fit, save_fit
from dosetree.config import RunConfig, load_config
from dosetree.datastore import (
    ExposureDataset,
    ReportLayout,
    load_covariates,
    load_dataset,
    normalize_baseline,
    write_dataset,
    write_manifest,
    write_report_tables,
)
from dosetree.diagnostics import acceptance_table, diagnostics_table, trace_table
from dosetree.exceptions import (
    ChainFormatError,
    ConfigurationError,
    DatasetError,
    NumericalError,
    SimulationError,
    SplineError,
)
from dosetree.sampler import PosteriorFit, fit_dataset
from dosetree.ui import figures
from dosetree.ui.console import (
    console,
    create_progress,
    display_fit_summary,
    display_settings,
    display_table,
    print_error,
    print_info,
    print_success,
    print_warning,
    setup_logging,
)

app = typer.Typer(
    name="dosetree",
    help="Bayesian regression trees with spline dose-response leaves for particle toxicity assays",
    add_completion=False,
    no_args_is_help=True,
)

INPUT_ERRORS = (
    ConfigurationError,
    DatasetError,
    SplineError,
    ChainFormatError,
    SimulationError,
    ValidationError,
)
PROGRESS_EVERY = 50


@contextmanager
def handle_errors(verbose: bool) -> Iterator[None]:
    """Map library errors to exit codes: 2 for bad input, 3 for numerical failures."""
    try:
        yield
    except typer.Exit:
        raise
    except KeyboardInterrupt:
        print_warning("\nOperation cancelled by user.")
        raise typer.Exit(130)
    except INPUT_ERRORS as e:
        print_error(str(e))
        raise typer.Exit(2)
    except NumericalError as e:
        print_error(f"Numerical failure: {e}")
        raise typer.Exit(3)
    except Exception as e:
        print_error(f"Unexpected error: {e}")
        if verbose:
            console.print(traceback.format_exc())
        raise typer.Exit(1)


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise DatasetError(f"{what} file not found: {path}")
    return path


def _prepare(dataset: ExposureDataset, normalize: Optional[bool]) -> ExposureDataset:
    """Normalize against control wells when asked, or by default when controls exist."""
    if normalize is None:
        normalize = dataset.controls is not None and not dataset.normalized
    if not normalize:
        return dataset
    return normalize_baseline(dataset)


def _load(
    data: Path, covariates: Path, control_label: str, normalize: Optional[bool]
) -> ExposureDataset:
    dataset = load_dataset(
        _require(data, "Responses"), _require(covariates, "Covariates"), control_label
    )
    return _prepare(dataset, normalize)


def _layout(out: Optional[Path], config: RunConfig) -> ReportLayout:
    return ReportLayout(out if out is not None else config.output_dir).create()


def _variable_index(fit: PosteriorFit, name: str) -> int:
    name = name.strip()
    if name in fit.covariate_names:
        return fit.covariate_names.index(name)
    if name.isdigit() and int(name) < fit.n_covariates:
        return int(name)
    raise DatasetError(f"Unknown variable '{name}'; known: {', '.join(fit.covariate_names)}")


def _parse_at(at: Optional[str]) -> Optional[Tuple[float, Optional[float]]]:
    if at is None:
        return None
    try:
        parts = [float(v) for v in at.split(",")]
    except ValueError as e:
        raise ConfigurationError(f"--at expects 'dose' or 'dose,time', got {at!r}") from e
    if len(parts) not in (1, 2):
        raise ConfigurationError(f"--at expects 'dose' or 'dose,time', got {at!r}")
    return (parts[0], parts[1] if len(parts) == 2 else None)


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def _write_predictive_figures(
    layout: ReportLayout,
    summaries: dict,
    fit: PosteriorFit,
    dataset: Optional[ExposureDataset],
    prefix: str,
) -> List[Path]:
    written = []
    for particle, summary in summaries.items():
        observed = None
        if dataset is not None and particle in dataset.particles:
            observed = dataset.copies()[dataset.particles.index(particle)]
        fig = figures.plot_predictive(summary, particle, observed, fit.system.n_dose)
        written.append(figures.save_figure(fig, layout.figures / f"{prefix}_{_safe(particle)}.svg"))
    return written


@app.command()
def fit(
    data: Path = typer.Option(..., "--data", "-d", help="Long-format responses CSV"),
    covariates: Path = typer.Option(..., "--covariates", "-x", help="Particle covariates CSV"),
    config_path: Optional[Path] = typer.Option(
        None, "--config", "-c", help="Flat key=value config"
    ),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    iterations: Optional[int] = typer.Option(None, "--iterations", help="MCMC sweeps per chain"),
    burn_in: Optional[int] = typer.Option(None, "--burn-in", help="Sweeps discarded"),
    thin: Optional[int] = typer.Option(None, "--thin", help="Keep every thin-th sweep"),
    chains: Optional[int] = typer.Option(None, "--chains", help="Number of chains"),
    jobs: Optional[int] = typer.Option(None, "--jobs", "-j", help="Parallel workers"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master random seed"),
    normalize: Optional[bool] = typer.Option(
        None,
        "--normalize/--no-normalize",
        help="Subtract control-well baselines (default: when controls exist)",
    ),
    checkpoint_every: Optional[int] = typer.Option(
        None, "--checkpoint-every", help="Save every chain's state every N sweeps"
    ),
    resume: bool = typer.Option(
        False, "--resume", help="Continue the chains checkpointed in the output directory"
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """Fit the tree model and write the chain and diagnostics."""
    setup_logging(verbose)
    with handle_errors(verbose):
        config = load_config(
            config_path, iterations=iterations, burn_in=burn_in, thin=thin,
            n_chains=chains, n_jobs=jobs, seed=seed, checkpoint_every=checkpoint_every,
        )
        dataset = _load(data, covariates, config.control_label, normalize)
        layout = _layout(out, config)
        store = CheckpointStore(layout.checkpoint)
        fingerprint = dataset_fingerprint(dataset)
        saved = store.load(fingerprint) if resume else None
        if not resume:
            if config.checkpoint_every:
                store.create(fingerprint)
            else:
                store.remove()
        if saved:
            print_info(f"Resuming {len(saved)} chain(s) from {layout.checkpoint}")
        checkpoint = store.save if config.checkpoint_every else None

        with create_progress() as progress:
            if config.n_jobs == 1 or config.n_chains == 1:
                tasks = [
                    progress.add_task(f"[cyan]Chain {c}", total=config.iterations)
                    for c in range(config.n_chains)
                ]

                def advance(chain_id: int, iteration: int) -> None:
                    if iteration % PROGRESS_EVERY == 0 or iteration == config.iterations:
                        progress.update(tasks[chain_id], completed=iteration)

                result = fit_dataset(
                    dataset, config, progress=advance, checkpoint=checkpoint, resume=saved
                )
            else:
                progress.add_task(f"[cyan]Running {config.n_chains} chains in parallel", total=None)
                result = fit_dataset(dataset, config, checkpoint=checkpoint, resume=saved)

        save_fit(result, layout.chain)
        store.remove()
        diagnostics = diagnostics_table(result.chains)
        write_report_tables(
            {
                "diagnostics": diagnostics,
                "acceptance": acceptance_table(result.chains),
                "trace": trace_table(result.chains),
            },
            layout.root,
        )
        figures.save_figure(figures.plot_trace(result.chains), layout.figures / "trace.svg")
        write_manifest(
            layout.root,
            config,
            {
                "command": "fit",
                "version": __version__,
                "data": data,
                "covariates": covariates,
                "normalized": dataset.normalized,
                "resumed": resume,
                "draws": len(result.draws),
            },
        )

        display_table(diagnostics, "Convergence Diagnostics")
        display_fit_summary(
            {
                "particles": dataset.n_particles,
                "chains": len(result.chains),
                "draws per chain": result.chains[0].n_draws if result.chains else 0,
                "change acceptance": float(np.nanmean(
                    [c.acceptance_rate("change") for c in result.chains]
                )),
            }
        )
        print_success(f"Chain written to {layout.chain}")


@app.command()
def predict(
    chain: Path = typer.Option(..., "--chain", help="Chain file written by fit"),
    covariates: Path = typer.Option(
        ..., "--covariates", "-x", help="Covariates of particles to predict"
    ),
    data: Optional[Path] = typer.Option(None, "--data", "-d", help="Responses to overlay"),
    level: float = typer.Option(0.90, "--level", min=0.01, max=0.99, help="Interval level"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Random seed"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """Posterior predictive curves or surfaces for new particles."""
    setup_logging(verbose)
    with handle_errors(verbose):
        config = load_config()
        posterior = load_fit(chain)
        particles, names, matrix, _ = load_covariates(_require(covariates, "Covariates"))
        if names != posterior.covariate_names:
            raise DatasetError(
                f"Covariates {', '.join(names)} do not match the chain's "
                f"{', '.join(posterior.covariate_names)}",
                path=str(covariates),
            )
        dataset = None
        if data is not None:
            control = posterior.settings.get("control_label", "control")
            dataset = _load(data, covariates, control, None)
            check_grids(posterior, dataset)
        layout = _layout(out, config)
        rng = np.random.default_rng(seed if seed is not None else config.seed)
        summaries = {
            particle: posterior_predictive(posterior, row, level, rng)
            for particle, row in zip(particles, matrix)
        }
        write_report_tables({"predictive": summaries_frame(summaries)}, layout.root)
        written = _write_predictive_figures(layout, summaries, posterior, dataset, "predict")
        print_success(f"Wrote {len(written)} predictive figure(s) to {layout.figures}")


@app.command()
def ppc(
    chain: Path = typer.Option(..., "--chain", help="Chain file written by fit"),
    data: Path = typer.Option(..., "--data", "-d", help="Training responses CSV"),
    covariates: Path = typer.Option(..., "--covariates", "-x", help="Training covariates CSV"),
    level: float = typer.Option(0.90, "--level", min=0.01, max=0.99, help="Interval level"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Random seed"),
    normalize: Optional[bool] = typer.Option(None, "--normalize/--no-normalize"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """Posterior predictive check: coverage of the training profiles."""
    setup_logging(verbose)
    with handle_errors(verbose):
        config = load_config()
        posterior = load_fit(chain)
        control = posterior.settings.get("control_label", "control")
        dataset = _load(data, covariates, control, normalize)
        layout = _layout(out, config)
        rng = np.random.default_rng(seed if seed is not None else config.seed)
        summaries, table = posterior_predictive_check(posterior, dataset, level, rng)
        write_report_tables(
            {"coverage": table, "predictive": summaries_frame(summaries)}, layout.root
        )
        _write_predictive_figures(layout, summaries, posterior, dataset, "ppc")
        display_table(table, f"Pointwise {level:.0%} Coverage")
        observed = table["n_obs"].to_numpy()
        overall = float(np.sum(table["coverage"].to_numpy() * observed) / observed.sum())
        print_info(f"Overall coverage: {overall:.3f}")


@app.command(name="pd")
def partial_dependence_command(
    chain: Path = typer.Option(..., "--chain", help="Chain file written by fit"),
    variables: str = typer.Option(..., "--vars", help="Variable name or 'name1,name2'"),
    at: Optional[str] = typer.Option(None, "--at", help="'dose' or 'dose,time' grid point"),
    grid_size: Optional[int] = typer.Option(
        None, "--grid-size", min=2, help="Covariate grid points"
    ),
    max_draws: Optional[int] = typer.Option(500, "--max-draws", min=1, help="Draws used"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """Partial dependence on one or two covariates."""
    setup_logging(verbose)
    with handle_errors(verbose):
        config = load_config()
        posterior = load_fit(chain)
        names = [v for v in variables.split(",") if v.strip()]
        if len(names) not in (1, 2):
            raise ConfigurationError("--vars takes one or two variable names")
        index = [_variable_index(posterior, n) for n in names]
        point = _parse_at(at)
        size = grid_size or config.pd_grid_size
        grids = [covariate_grid(posterior, j, size) for j in index]
        if len(index) == 1:
            result = partial_dependence(posterior, index[0], grids[0], point, max_draws)
        else:
            result = partial_dependence_2var(
                posterior, index[0], index[1], (grids[0], grids[1]), point, max_draws
            )
        layout = _layout(out, config)
        stem = "pd_" + "_".join(_safe(posterior.covariate_names[j]) for j in index)
        write_report_tables({stem: result.to_frame()}, layout.root)
        fig = figures.plot_partial_dependence(
            result,
            posterior.covariates[:, index],
            [posterior.log_scale[j] for j in index],
        )
        path = figures.save_figure(fig, layout.figures / f"{stem}.svg")
        spread = float(np.ptp(result.values))
        print_success(f"Partial dependence written to {path} (range {spread:.4g})")


@app.command()
def sens(
    chain: Path = typer.Option(..., "--chain", help="Chain file written by fit"),
    n_base: Optional[int] = typer.Option(None, "--n-base", help="Latin hypercube base size"),
    mode: Optional[str] = typer.Option(None, "--mode", help="averaged or per-point"),
    include_noise: Optional[bool] = typer.Option(
        None, "--include-noise/--mean-only", help="Attenuate indices by the noise variance"
    ),
    max_draws: Optional[int] = typer.Option(200, "--max-draws", min=1, help="Draws used"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Random seed"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """First-order and total sensitivity indices."""
    setup_logging(verbose)
    with handle_errors(verbose):
        config = load_config(n_base=n_base, sens_mode=mode, include_noise=include_noise)
        posterior = load_fit(chain)
        rng = np.random.default_rng(seed if seed is not None else config.seed)
        report = sensitivity_indices(
            posterior, config.n_base, config.sens_mode, rng, config.include_noise, max_draws
        )
        layout = _layout(out, config)
        frame = report.to_frame()
        name = "sensitivity" if report.mode == "averaged" else "sensitivity_points"
        write_report_tables({name: frame}, layout.root)
        figures.save_figure(figures.plot_sensitivity(report), layout.figures / "sensitivity.svg")
        display_table(frame, "Sensitivity Indices")
        print_info(f"Ranking by total index: {', '.join(report.ranking())}")


@app.command()
def loco(
    data: Path = typer.Option(..., "--data", "-d", help="Long-format responses CSV"),
    covariates: Path = typer.Option(..., "--covariates", "-x", help="Particle covariates CSV"),
    config_path: Optional[Path] = typer.Option(
        None, "--config", "-c", help="Flat key=value config"
    ),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    iterations: Optional[int] = typer.Option(None, "--iterations", help="MCMC sweeps per chain"),
    burn_in: Optional[int] = typer.Option(None, "--burn-in", help="Sweeps discarded"),
    thin: Optional[int] = typer.Option(None, "--thin", help="Keep every thin-th sweep"),
    chains: Optional[int] = typer.Option(None, "--chains", help="Number of chains per fold"),
    jobs: Optional[int] = typer.Option(None, "--jobs", "-j", help="Parallel folds"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master random seed"),
    normalize: Optional[bool] = typer.Option(None, "--normalize/--no-normalize"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """Leave-a-curve-out validation."""
    setup_logging(verbose)
    with handle_errors(verbose):
        config = load_config(
            config_path, iterations=iterations, burn_in=burn_in, thin=thin,
            n_chains=chains, n_jobs=jobs, seed=seed,
        )
        dataset = _load(data, covariates, config.control_label, normalize)
        layout = _layout(out, config)
        with create_progress() as progress:
            task = progress.add_task("[cyan]Folds", total=dataset.n_particles)
            result = loco_validation(
                dataset, config, lambda done: progress.update(task, completed=done)
            )
        summaries: dict = result.summaries
        tables = {"loco": result.table}
        if summaries:
            tables["loco_predictive"] = summaries_frame(summaries)
        write_report_tables(tables, layout.root)
        for particle, summary in summaries.items():
            _save_loco_figure(layout, particle, summary, dataset)
        write_manifest(layout.root, config, {"command": "loco", "version": __version__})

        display_table(result.table, "Leave-a-Curve-Out Validation")
        failed = result.table.loc[result.table["status"] == "failed", "particle"].tolist()
        if failed:
            print_warning(f"Failed folds: {', '.join(failed)}")
        if result.flagged:
            print_warning(f"Poorly predicted particles: {', '.join(result.flagged)}")
        print_success(f"Median fold coverage {result.median_coverage:.3f}")


def _save_loco_figure(
    layout: ReportLayout, particle: str, summary: PredictiveSummary, dataset: ExposureDataset
) -> None:
    observed = dataset.copies()[dataset.particles.index(particle)]
    fig = figures.plot_predictive(summary, f"{particle} (held out)", observed, dataset.dose_grid.n)
    figures.save_figure(fig, layout.figures / f"loco_{_safe(particle)}.svg")


@app.command()
def simulate(
    spec: Optional[Path] = typer.Option(None, "--spec", help="Flat key=value simulation spec"),
    preset: Optional[str] = typer.Option(
        None, "--preset", help="default, pi, isolated or additive"
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Random seed"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """Write a synthetic dataset and its ground truth."""
    setup_logging(verbose)
    with handle_errors(verbose):
        config = load_config()
        simulation = load_simulation_spec(spec, preset=preset, seed=seed)
        result = simulate_dataset(simulation)
        target = out if out is not None else config.output_dir
        target.mkdir(parents=True, exist_ok=True)
        write_dataset(result.dataset, target / "responses.csv", target / "covariates.csv")
        result.write_truth(target)
        print_success(
            f"Simulated {result.dataset.n_particles} particles "
            f"({simulation.preset} preset) in {target}"
        )


@app.command()
def config(
    config_path: Optional[Path] = typer.Option(
        None, "--config", "-c", help="Flat key=value config"
    ),
) -> None:
    """Display the resolved configuration."""
    with handle_errors(False):
        cfg = load_config(config_path)
        display_settings(cfg.to_flat())
        source = config_path if config_path is not None else "defaults and DOSETREE_* environment"
        console.print(f"\n[dim]Source: {source}[/dim]\n")


@app.command()
def version() -> None:
    """Show version information."""
    console.print(f"\n[bold cyan]dosetree[/bold cyan] version [green]{__version__}[/green]\n")


def main() -> None:
    """Main entry point."""
    app()


if __name__ == "__main__":
    main()
