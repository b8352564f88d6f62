"""Chain container: a versioned SQLite file holding every stored draw of a fit.

Layout::

    meta(key, value)                     magic, format version, grids, spline
                                         settings, covariates, run settings
    chains(chain_id, seed, config)       McmcConfig of each chain as JSON
    draws(chain_id, idx, tree, coeffs,   tree text without coefficients, leaf
          sigma2, phi_d, phi_t, tau2,    coefficients as one little-endian
          log_post)                      float64 blob, scalars as REAL
    acceptance(chain_id, move, status, count)
    trace(chain_id, log_post)            full log-posterior trace as a blob

Writing the same fit twice produces byte-identical files.

A checkpoint file of an unfinished fit shares the meta and draws tables and
adds one ``checkpoints`` row per chain: its sweep, settings, generator state,
current state, acceptance counts and trace so far.
"""

import hashlib
import json
import logging
import math
import sqlite3
from contextlib import closing
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from dosetree.basis import Grid1D, SplineSystem
from dosetree.config import McmcConfig
from dosetree.datastore import ExposureDataset
from dosetree.exceptions import ChainFormatError, SplineError, TreeValidityError
from dosetree.likelihood import NoiseModel
from dosetree.sampler import (
    ChainCheckpoint,
    ChainState,
    PosteriorChain,
    PosteriorFit,
    empty_acceptance,
)
from dosetree.tree import Tree

logger = logging.getLogger(__name__)

MAGIC = "dosetree-chain"
FORMAT_VERSION = 1
COEFF_DTYPE = "<f8"

SCHEMA = (
    "CREATE TABLE meta (key TEXT PRIMARY KEY, value TEXT NOT NULL)",
    "CREATE TABLE chains (chain_id INTEGER PRIMARY KEY, seed TEXT NOT NULL, config TEXT NOT NULL)",
    """
    CREATE TABLE draws (
        chain_id INTEGER NOT NULL,
        idx INTEGER NOT NULL,
        tree TEXT NOT NULL,
        coeffs BLOB NOT NULL,
        sigma2 REAL NOT NULL,
        phi_d REAL NOT NULL,
        phi_t REAL NOT NULL,
        tau2 REAL NOT NULL,
        log_post REAL,
        PRIMARY KEY (chain_id, idx)
    )
    """,
    """
    CREATE TABLE acceptance (
        chain_id INTEGER NOT NULL,
        move TEXT NOT NULL,
        status TEXT NOT NULL,
        count INTEGER NOT NULL,
        PRIMARY KEY (chain_id, move, status)
    )
    """,
    "CREATE TABLE trace (chain_id INTEGER PRIMARY KEY, log_post BLOB NOT NULL)",
)

sqlite_retry = retry(
    retry=retry_if_exception_type(sqlite3.OperationalError),
    stop=stop_after_attempt(5),
    wait=wait_exponential(multiplier=0.1, max=2),
    reraise=True,
)


def _floats(values: Any) -> str:
    return json.dumps([float(v) for v in np.asarray(values, dtype=float).ravel()])


def _meta(fit: PosteriorFit) -> Dict[str, str]:
    system = fit.system
    return {
        "magic": MAGIC,
        "format_version": str(FORMAT_VERSION),
        "dose_grid": _floats(system.dose_grid.values),
        "time_grid": "null" if system.time_grid is None else _floats(system.time_grid.values),
        "order_d": str(system.order_d),
        "order_t": str(system.order_t),
        "knots_d": _floats(system.interior_knots_d),
        "knots_t": _floats(system.interior_knots_t),
        "eta": repr(system.eta),
        "distance": fit.distance,
        "particles": json.dumps(list(fit.particles)),
        "covariate_names": json.dumps(list(fit.covariate_names)),
        "log_scale": json.dumps([bool(v) for v in fit.log_scale]),
        "covariates": json.dumps(np.asarray(fit.covariates, dtype=float).tolist()),
        "settings": json.dumps(fit.settings),
    }


DrawRow = Tuple[str, bytes, float, float, float, float, Optional[float]]


def _encode_state(state: ChainState) -> DrawRow:
    """Tree text without coefficients, the coefficient blob and the scalars."""
    coeffs = np.concatenate([np.asarray(c, dtype=float) for c in state.tree.leaf_coeffs])
    return (
        state.tree.to_text(include_coeffs=False),
        coeffs.astype(COEFF_DTYPE).tobytes(),
        state.noise.sigma2,
        state.noise.phi_d,
        state.noise.phi_t,
        state.tau2,
        state.log_post if math.isfinite(state.log_post) else None,
    )


def _decode_state(
    text: str, blob: bytes, sigma2: float, phi_d: float, phi_t: float, tau2: float,
    log_post: Optional[float],
) -> ChainState:
    tree = Tree.from_text(text)
    coeffs = np.frombuffer(blob, dtype=COEFF_DTYPE).astype(float)
    return ChainState(
        tree.with_leaf_coeffs(np.split(coeffs, tree.n_leaves)),
        NoiseModel(sigma2, phi_d, phi_t),
        tau2,
        math.nan if log_post is None else log_post,
    )


class ChainStore:
    """Read and write one chain file."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def _connect(self) -> sqlite3.Connection:
        return sqlite3.connect(str(self.path))

    def create(self, fit: PosteriorFit) -> None:
        """Start a fresh file with the schema and the fit's metadata, replacing any old file."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            self.path.unlink()
        with closing(self._connect()) as conn, conn:
            for statement in SCHEMA:
                conn.execute(statement)
            conn.executemany(
                "INSERT INTO meta (key, value) VALUES (?, ?)", list(_meta(fit).items())
            )

    @sqlite_retry
    def append_chain(self, chain: PosteriorChain) -> None:
        """Append one chain's draws, acceptance counts and trace in a single transaction."""
        rows = [(chain.chain_id, idx, *_encode_state(d)) for idx, d in enumerate(chain.draws)]
        counts = [
            (chain.chain_id, move, status, count)
            for move, statuses in chain.acceptance.items()
            for status, count in statuses.items()
        ]
        trace = np.asarray(chain.log_post_trace, dtype=COEFF_DTYPE).tobytes()
        with closing(self._connect()) as conn, conn:
            conn.execute(
                "INSERT INTO chains (chain_id, seed, config) VALUES (?, ?, ?)",
                (chain.chain_id, str(chain.seed), chain.config.model_dump_json()),
            )
            conn.executemany("INSERT INTO draws VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)", rows)
            conn.executemany("INSERT INTO acceptance VALUES (?, ?, ?, ?)", counts)
            conn.execute("INSERT INTO trace VALUES (?, ?)", (chain.chain_id, trace))
        logger.debug("Appended chain %d (%d draws) to %s", chain.chain_id, len(rows), self.path)

    def read_meta(self) -> Dict[str, str]:
        """Metadata of the file after checking the magic string and format version.

        Raises:
            ChainFormatError: If the file is missing, not a chain file or has another version
        """
        if not self.path.is_file():
            raise ChainFormatError(f"Chain file not found: {self.path}")
        try:
            with closing(self._connect()) as conn:
                meta = dict(conn.execute("SELECT key, value FROM meta").fetchall())
        except sqlite3.DatabaseError as e:
            raise ChainFormatError(f"{self.path} is not a dosetree chain file: {e}") from e
        if meta.get("magic") != MAGIC:
            raise ChainFormatError(f"{self.path} is not a dosetree chain file (bad magic)")
        version = meta.get("format_version")
        if version != str(FORMAT_VERSION):
            raise ChainFormatError(
                f"{self.path} has chain format version {version}, expected {FORMAT_VERSION}"
            )
        return meta

    def load(self) -> PosteriorFit:
        """Rebuild the fit stored in the file.

        Raises:
            ChainFormatError: If the file cannot be read back into a fit
        """
        meta = self.read_meta()
        try:
            system = _system(meta)
            with closing(self._connect()) as conn:
                chains = [_chain(conn, *row) for row in conn.execute(
                    "SELECT chain_id, seed, config FROM chains ORDER BY chain_id"
                ).fetchall()]
            return PosteriorFit(
                chains=chains,
                system=system,
                covariates=np.array(json.loads(meta["covariates"]), dtype=float),
                covariate_names=tuple(json.loads(meta["covariate_names"])),
                particles=tuple(json.loads(meta["particles"])),
                log_scale=tuple(json.loads(meta["log_scale"])),
                distance=meta["distance"],
                settings=json.loads(meta["settings"]),
            )
        except (KeyError, ValueError, SplineError, TreeValidityError, sqlite3.DatabaseError) as e:
            raise ChainFormatError(f"Corrupt chain file {self.path}: {e}") from e


def _grid(raw: str) -> Optional[Grid1D]:
    values = json.loads(raw)
    return None if values is None else Grid1D(np.array(values, dtype=float))


def _system(meta: Dict[str, str]) -> SplineSystem:
    dose_grid = _grid(meta["dose_grid"])
    assert dose_grid is not None
    return SplineSystem.build(
        dose_grid,
        _grid(meta["time_grid"]),
        order_d=int(meta["order_d"]),
        order_t=int(meta["order_t"]),
        knots_d=json.loads(meta["knots_d"]),
        knots_t=json.loads(meta["knots_t"]),
        eta=float(meta["eta"]),
    )


def _chain(conn: sqlite3.Connection, chain_id: int, seed: str, config: str) -> PosteriorChain:
    chain = PosteriorChain(
        chain_id=chain_id, seed=int(seed), config=McmcConfig.model_validate_json(config)
    )
    rows = conn.execute(
        "SELECT tree, coeffs, sigma2, phi_d, phi_t, tau2, log_post FROM draws "
        "WHERE chain_id = ? ORDER BY idx",
        (chain_id,),
    ).fetchall()
    chain.draws.extend(_decode_state(*row) for row in rows)
    acceptance = empty_acceptance()
    for move, status, count in conn.execute(
        "SELECT move, status, count FROM acceptance WHERE chain_id = ?", (chain_id,)
    ):
        acceptance.setdefault(move, {})[status] = count
    chain.acceptance = acceptance
    (trace,) = conn.execute("SELECT log_post FROM trace WHERE chain_id = ?", (chain_id,)).fetchone()
    chain.log_post_trace = np.frombuffer(trace, dtype=COEFF_DTYPE).astype(float)
    return chain


def save_fit(fit: PosteriorFit, path: Union[str, Path]) -> Path:
    """Write a fit to ``path``, replacing any existing file."""
    store = ChainStore(path)
    store.create(fit)
    for chain in fit.chains:
        store.append_chain(chain)
    logger.info("Saved %d chains (%d draws) to %s", len(fit.chains), len(fit.draws), store.path)
    return store.path


def load_fit(path: Union[str, Path]) -> PosteriorFit:
    """Read a fit written by :func:`save_fit`.

    Raises:
        ChainFormatError: On a missing, foreign, corrupt or other-version file
    """
    return ChainStore(path).load()



CHECKPOINT_MAGIC = "dosetree-checkpoint"

CHECKPOINT_SCHEMA = (
    SCHEMA[0],
    SCHEMA[2],
    """
    CREATE TABLE checkpoints (
        chain_id INTEGER PRIMARY KEY,
        sweep INTEGER NOT NULL,
        seed TEXT NOT NULL,
        config TEXT NOT NULL,
        rng_state TEXT NOT NULL,
        tree TEXT NOT NULL,
        coeffs BLOB NOT NULL,
        sigma2 REAL NOT NULL,
        phi_d REAL NOT NULL,
        phi_t REAL NOT NULL,
        tau2 REAL NOT NULL,
        log_post REAL,
        acceptance TEXT NOT NULL,
        trace BLOB NOT NULL
    )
    """,
)


def dataset_fingerprint(dataset: ExposureDataset) -> str:
    """Digest of the particles, covariates, grids and responses a chain is fitted to."""
    digest = hashlib.sha256(json.dumps(list(dataset.particles)).encode("utf-8"))
    arrays = [dataset.covariates, dataset.responses, dataset.dose_grid.values]
    if dataset.time_grid is not None:
        arrays.append(dataset.time_grid.values)
    for array in arrays:
        digest.update(np.ascontiguousarray(array, dtype=COEFF_DTYPE).tobytes())
    return digest.hexdigest()


class CheckpointStore:
    """Latest saved state of every chain of an unfinished fit.

    Each save replaces the chain's state row and appends the draws kept since
    the previous save, in one transaction, so a killed run leaves the last
    complete checkpoint behind. Chains running in other processes write to the
    same file; lock contention is retried.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def _connect(self) -> sqlite3.Connection:
        return sqlite3.connect(str(self.path), timeout=30.0)

    def create(self, fingerprint: str) -> "CheckpointStore":
        """Start an empty checkpoint file for data with the given fingerprint."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.remove()
        with closing(self._connect()) as conn, conn:
            for statement in CHECKPOINT_SCHEMA:
                conn.execute(statement)
            conn.executemany(
                "INSERT INTO meta (key, value) VALUES (?, ?)",
                [
                    ("magic", CHECKPOINT_MAGIC),
                    ("format_version", str(FORMAT_VERSION)),
                    ("fingerprint", fingerprint),
                ],
            )
        return self

    def remove(self) -> None:
        self.path.unlink(missing_ok=True)

    @sqlite_retry
    def save(self, checkpoint: ChainCheckpoint) -> None:
        chain = checkpoint.chain
        with closing(self._connect()) as conn, conn:
            (stored,) = conn.execute(
                "SELECT COUNT(*) FROM draws WHERE chain_id = ?", (chain.chain_id,)
            ).fetchone()
            rows = [
                (chain.chain_id, idx, *_encode_state(chain.draws[idx]))
                for idx in range(stored, chain.n_draws)
            ]
            conn.executemany("INSERT INTO draws VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)", rows)
            conn.execute(
                "INSERT OR REPLACE INTO checkpoints VALUES "
                "(?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    chain.chain_id,
                    checkpoint.sweep,
                    str(chain.seed),
                    chain.config.model_dump_json(),
                    json.dumps(checkpoint.rng_state),
                    *_encode_state(checkpoint.state),
                    json.dumps(chain.acceptance),
                    np.asarray(
                        chain.log_post_trace[: checkpoint.sweep], dtype=COEFF_DTYPE
                    ).tobytes(),
                ),
            )
        logger.debug(
            "Checkpointed chain %d at sweep %d (%d draws)",
            chain.chain_id,
            checkpoint.sweep,
            chain.n_draws,
        )

    def load(self, fingerprint: str) -> Dict[int, ChainCheckpoint]:
        """Saved chain states by chain id.

        Raises:
            ChainFormatError: If the file is missing, foreign, corrupt or was
                written for other data
        """
        if not self.path.is_file():
            raise ChainFormatError(f"Checkpoint file not found: {self.path}")
        try:
            with closing(self._connect()) as conn:
                meta = dict(conn.execute("SELECT key, value FROM meta").fetchall())
                if meta.get("magic") != CHECKPOINT_MAGIC:
                    raise ChainFormatError(f"{self.path} is not a dosetree checkpoint file")
                if meta.get("format_version") != str(FORMAT_VERSION):
                    raise ChainFormatError(
                        f"{self.path} has checkpoint format version "
                        f"{meta.get('format_version')}, expected {FORMAT_VERSION}"
                    )
                if meta.get("fingerprint") != fingerprint:
                    raise ChainFormatError(
                        f"{self.path} was written for a different dataset"
                    )
                rows = conn.execute("SELECT * FROM checkpoints ORDER BY chain_id").fetchall()
                checkpoints = {row[0]: _checkpoint(conn, *row) for row in rows}
        except (KeyError, ValueError, SplineError, TreeValidityError, sqlite3.DatabaseError) as e:
            raise ChainFormatError(f"Corrupt checkpoint file {self.path}: {e}") from e
        logger.info(
            "Loaded checkpoints of %d chains from %s (sweeps %s)",
            len(checkpoints),
            self.path,
            ", ".join(str(c.sweep) for c in checkpoints.values()),
        )
        return checkpoints


def _checkpoint(
    conn: sqlite3.Connection,
    chain_id: int,
    sweep: int,
    seed: str,
    config: str,
    rng_state: str,
    *rest: Any,
) -> ChainCheckpoint:
    state = _decode_state(*rest[:7])
    acceptance, trace = rest[7:]
    chain = PosteriorChain(
        chain_id=chain_id,
        seed=int(seed),
        config=McmcConfig.model_validate_json(config),
        acceptance=json.loads(acceptance),
        log_post_trace=np.frombuffer(trace, dtype=COEFF_DTYPE).astype(float),
    )
    rows = conn.execute(
        "SELECT tree, coeffs, sigma2, phi_d, phi_t, tau2, log_post FROM draws "
        "WHERE chain_id = ? ORDER BY idx",
        (chain_id,),
    ).fetchall()
    chain.draws.extend(_decode_state(*row) for row in rows)
    return ChainCheckpoint(sweep, state, json.loads(rng_state), chain)
