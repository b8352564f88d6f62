"""Convergence diagnostics on scalar traces."""

import math
from typing import Dict, Iterable, Sequence

import numpy as np
import pandas as pd

from dosetree.sampler import PosteriorChain

SCALARS = ("sigma2", "tau2", "phi_d", "phi_t", "n_leaves", "log_post")


def _as_chains(samples: np.ndarray) -> np.ndarray:
    draws = np.asarray(samples, dtype=float)
    if draws.ndim == 1:
        draws = draws[None, :]
    if draws.ndim != 2:
        raise ValueError(f"Expected (n_chains, n_draws), got shape {draws.shape}")
    return draws


def _split(draws: np.ndarray) -> np.ndarray:
    half = draws.shape[1] // 2
    if half < 2:
        raise ValueError("Need at least 4 draws per chain")
    return np.vstack([draws[:, :half], draws[:, -half:]])


def split_rhat(samples: np.ndarray) -> float:
    """Split-chain potential scale reduction factor.

    Each chain is halved, so a single chain still yields a value. Constant
    traces give NaN.
    """
    chains = _split(_as_chains(samples))
    n = chains.shape[1]
    within = chains.var(axis=1, ddof=1).mean()
    between = n * chains.mean(axis=1).var(ddof=1)
    if within <= 0:
        return math.nan
    pooled = (n - 1) / n * within + between / n
    return float(math.sqrt(pooled / within))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    centered = x - x.mean()
    spectrum = np.fft.rfft(centered, size)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), size)[:n]
    return acov / n


def effective_sample_size(samples: np.ndarray) -> float:
    """Effective sample size from split chains with Geyer's initial monotone sequence."""
    chains = _split(_as_chains(samples))
    m, n = chains.shape
    acov = np.array([_autocovariance(c) for c in chains])
    chain_var = acov[:, 0] * n / (n - 1)
    within = chain_var.mean()
    var_plus = within * (n - 1) / n
    if m > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return math.nan
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0

    # sum autocorrelation pairs while positive, forcing the pair sums to decrease
    total = 0.0
    previous = math.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        pair = min(pair, previous)
        total += pair
        previous = pair
    tau = -1.0 + 2.0 * total
    return float(m * n / max(tau, 1.0 / math.log10(m * n + 10)))


def geweke_z(trace: Sequence[float], first: float = 0.1, last: float = 0.5) -> float:
    """Geweke z-score comparing the means of the first and last parts of a trace."""
    x = np.asarray(trace, dtype=float)
    if not 0 < first < 1 or not 0 < last < 1 or first + last > 1:
        raise ValueError("first and last must be fractions summing to at most 1")
    a = x[: int(first * x.size)]
    b = x[x.size - int(last * x.size) :]
    if a.size < 4 or b.size < 4:
        raise ValueError("Trace too short for a Geweke test")

    def spectral_variance(part: np.ndarray) -> float:
        ess = effective_sample_size(part)
        if not math.isfinite(ess):
            return 0.0
        return float(part.var(ddof=1) / ess)

    denominator = spectral_variance(a) + spectral_variance(b)
    if denominator <= 0:
        return math.nan
    return float((a.mean() - b.mean()) / math.sqrt(denominator))


def diagnostics_table(chains: Iterable[PosteriorChain]) -> pd.DataFrame:
    """Split R-hat, ESS, Geweke z and posterior mean per scalar parameter."""
    chains = list(chains)
    rows = []
    lengths = {c.n_draws for c in chains}
    usable = min(lengths) if lengths else 0
    for name in SCALARS:
        if name == "phi_t" and all(np.all(c.scalar("phi_t") == 0) for c in chains):
            continue
        stacked = np.vstack([c.scalar(name)[:usable] for c in chains]) if usable else None
        row: Dict[str, object] = {"parameter": name}
        if stacked is None or usable < 4:
            row.update(mean=math.nan, rhat=math.nan, ess=math.nan, geweke_z=math.nan)
        else:
            row["mean"] = float(stacked.mean())
            row["rhat"] = split_rhat(stacked)
            row["ess"] = effective_sample_size(stacked)
            try:
                row["geweke_z"] = geweke_z(stacked[0])
            except ValueError:
                row["geweke_z"] = math.nan
        rows.append(row)
    return pd.DataFrame(rows, columns=["parameter", "mean", "rhat", "ess", "geweke_z"])


def acceptance_table(chains: Iterable[PosteriorChain]) -> pd.DataFrame:
    """Post-burn-in proposal outcomes per chain and move."""
    rows = []
    for chain in chains:
        for move, counts in chain.acceptance.items():
            proposed = sum(counts.values())
            rows.append(
                {
                    "chain": chain.chain_id,
                    "move": move,
                    "proposed": proposed,
                    **counts,
                    "rate": counts["accepted"] / proposed if proposed else math.nan,
                }
            )
    return pd.DataFrame(rows)


def trace_table(chains: Iterable[PosteriorChain]) -> pd.DataFrame:
    """Log-posterior trace of every sweep, long format."""
    frames = [
        pd.DataFrame(
            {
                "chain": chain.chain_id,
                "iteration": np.arange(1, chain.log_post_trace.size + 1),
                "log_post": chain.log_post_trace,
            }
        )
        for chain in chains
    ]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["chain", "iteration", "log_post"]
    )
