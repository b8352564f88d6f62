"""Leave-a-curve-out validation: refit without each particle and predict it."""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from dosetree.analytics.predictive import PredictiveSummary, posterior_predictive
from dosetree.config import RunConfig
from dosetree.datastore import ExposureDataset
from dosetree.exceptions import DatasetError, DoseTreeError
from dosetree.sampler import fit_dataset

logger = logging.getLogger(__name__)

MIN_PARTICLES = 3
COLUMNS = ["particle", "coverage", "rmse", "n_obs", "isolated", "flagged", "status"]


@dataclass(frozen=True)
class LocoResult:
    """Held-out predictive summaries (failed folds are absent) and the fold table."""

    summaries: Dict[str, PredictiveSummary]
    table: pd.DataFrame

    @property
    def flagged(self) -> List[str]:
        return list(self.table.loc[self.table["flagged"], "particle"])

    @property
    def median_coverage(self) -> float:
        return float(self.table["coverage"].median())


def fold_seeds(seed: int, index: int) -> Tuple[int, np.random.SeedSequence]:
    """Fit seed and prediction seed of fold ``index``; independent of fold order."""
    sequence = np.random.SeedSequence([seed, index])
    fit_seed = int(sequence.generate_state(1, np.uint64)[0])
    return fit_seed, sequence.spawn(1)[0]


def isolated_particles(covariates: np.ndarray) -> np.ndarray:
    """Particles lying outside the range of the others in at least one covariate."""
    n = covariates.shape[0]
    isolated = np.zeros(n, dtype=bool)
    for i in range(n):
        others = np.delete(covariates, i, axis=0)
        low, high = others.min(axis=0), others.max(axis=0)
        isolated[i] = bool(np.any((covariates[i] < low) | (covariates[i] > high)))
    return isolated


def _run_fold(
    dataset: ExposureDataset, config: RunConfig, index: int
) -> Tuple[Optional[PredictiveSummary], Dict[str, object]]:
    particle = dataset.particles[index]
    copies = dataset.copies()[index]
    row: Dict[str, object] = {
        "particle": particle,
        "coverage": math.nan,
        "rmse": math.nan,
        "n_obs": int((~np.isnan(copies)).sum()),
    }
    fit_seed, predict_seed = fold_seeds(config.seed, index)
    try:
        fit = fit_dataset(dataset.without(index), config, seed=fit_seed, n_jobs=1)
        summary = posterior_predictive(
            fit, dataset.covariates[index], config.level, np.random.default_rng(predict_seed)
        )
    except DoseTreeError as e:
        logger.warning("Fold for particle %s failed and is skipped: %s", particle, e)
        row["status"] = "failed"
        return None, row
    row.update(coverage=summary.coverage(copies), rmse=summary.rmse(copies), status="ok")
    return summary, row


def loco_validation(
    dataset: ExposureDataset,
    config: RunConfig,
    progress: Optional[Callable[[int], None]] = None,
) -> LocoResult:
    """Refit on every leave-one-particle-out dataset and score the held-out profile.

    Folds run in parallel with ``config.n_jobs`` workers; each fold's chains are
    seeded from the master seed and the fold index only. A fold is flagged when
    its coverage falls below ``level - loco_flag_margin``.

    Args:
        dataset: Full dataset
        config: Run configuration used for every fold
        progress: Called with the number of finished folds

    Raises:
        DatasetError: If the dataset has fewer than three particles
    """
    if dataset.n_particles < MIN_PARTICLES:
        raise DatasetError(
            f"Leave-a-curve-out validation needs at least {MIN_PARTICLES} particles, "
            f"got {dataset.n_particles}"
        )
    jobs = (delayed(_run_fold)(dataset, config, i) for i in range(dataset.n_particles))
    results = []
    for done, result in enumerate(
        Parallel(n_jobs=config.n_jobs, return_as="generator")(jobs), start=1
    ):
        results.append(result)
        if progress is not None:
            progress(done)

    isolated = isolated_particles(dataset.covariates)
    threshold = config.level - config.loco_flag_margin
    summaries: Dict[str, PredictiveSummary] = {}
    rows = []
    for i, (summary, row) in enumerate(results):
        row["isolated"] = bool(isolated[i])
        coverage = float(row["coverage"])  # type: ignore[arg-type]
        row["flagged"] = bool(math.isfinite(coverage) and coverage < threshold)
        if summary is not None:
            summaries[dataset.particles[i]] = summary
        rows.append(row)

    table = pd.DataFrame(rows, columns=COLUMNS)
    failed = int((table["status"] == "failed").sum())
    logger.info(
        "LOCO: %d folds, %d failed, median coverage %.3f, flagged: %s",
        len(table),
        failed,
        table["coverage"].median(),
        ", ".join(table.loc[table["flagged"], "particle"]) or "none",
    )
    return LocoResult(summaries=summaries, table=table)
