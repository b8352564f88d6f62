"""Dataset ingestion, control-well normalization and report persistence.

Responses are long-format CSV::

    particle,replicate,dose,time,response[,tray]

(``time`` may be omitted or constant for dose-only assays). Covariates are
``particle,<prop1>,...,<propP>`` with an optional ``#log: prop,...`` directive
flagging log-scale properties. Lines starting with ``#`` are comments. Rows
whose particle equals the control label are control wells.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from dosetree.basis import Grid1D
from dosetree.config import RunConfig, save_config
from dosetree.exceptions import DatasetError, SplineError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
RESPONSE_COLUMNS = ("particle", "replicate", "dose", "time", "response")
LOG_DIRECTIVE = "#log:"


@dataclass(frozen=True, eq=False)
class ExposureDataset:
    """Responses indexed ``(particle, replicate, dose, time)`` plus particle covariates.

    ``responses`` has shape ``(I, K, n_dose, n_time)`` with ``NaN`` for cells
    that were not observed (including replicates a particle does not have);
    dose-only data use ``n_time == 1`` and no time grid.
    """

    particles: Tuple[str, ...]
    covariate_names: Tuple[str, ...]
    covariates: np.ndarray
    dose_grid: Grid1D
    responses: np.ndarray
    time_grid: Optional[Grid1D] = None
    log_scale: Tuple[bool, ...] = ()
    replicates: Tuple[str, ...] = ()
    trays: Optional[np.ndarray] = None
    controls: Optional[pd.DataFrame] = None
    control_label: str = "control"
    normalized: bool = False

    def __post_init__(self) -> None:
        covariates = np.asarray(self.covariates, dtype=float)
        if covariates.shape != (len(self.particles), len(self.covariate_names)):
            raise DatasetError(
                f"Covariate matrix shape {covariates.shape} does not match "
                f"{len(self.particles)} particles x {len(self.covariate_names)} properties"
            )
        if not np.all(np.isfinite(covariates)):
            raise DatasetError("Covariates must be finite")
        n_time = 1 if self.time_grid is None else self.time_grid.n
        expected = (len(self.particles), self.responses.shape[1], self.dose_grid.n, n_time)
        if self.responses.shape != expected:
            raise DatasetError(f"Responses have shape {self.responses.shape}, expected {expected}")
        complete = ~np.isnan(self.responses).reshape(expected[0], expected[1], -1).any(axis=2)
        incomplete = [p for p, ok in zip(self.particles, complete.any(axis=1)) if not ok]
        if incomplete:
            raise DatasetError(
                f"Particles without a fully observed replicate profile: {', '.join(incomplete)}"
            )
        object.__setattr__(self, "covariates", covariates)
        if not self.log_scale:
            object.__setattr__(self, "log_scale", (False,) * len(self.covariate_names))
        if not self.replicates:
            names = tuple(str(k + 1) for k in range(self.responses.shape[1]))
            object.__setattr__(self, "replicates", names)

    @property
    def n_particles(self) -> int:
        return len(self.particles)

    @property
    def n_replicates(self) -> int:
        return int(self.responses.shape[1])

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def is_2d(self) -> bool:
        return self.time_grid is not None

    @property
    def mask(self) -> np.ndarray:
        """True where a response was observed."""
        return ~np.isnan(self.responses)

    def copies(self) -> np.ndarray:
        """Responses as ``(I, K, n_cells)`` dose-major profiles."""
        return self.responses.reshape(self.n_particles, self.n_replicates, -1)

    def covariate_index(self, name: str) -> int:
        """Index of a covariate given its name or its position as a string.

        Raises:
            DatasetError: If no such covariate exists
        """
        if name in self.covariate_names:
            return self.covariate_names.index(name)
        if name.isdigit() and int(name) < self.n_covariates:
            return int(name)
        raise DatasetError(
            f"Unknown variable '{name}'; known: {', '.join(self.covariate_names)}"
        )

    def subset(self, rows: Sequence[int]) -> "ExposureDataset":
        """Dataset restricted to the given particle rows (controls kept)."""
        rows = list(rows)
        return replace(
            self,
            particles=tuple(self.particles[i] for i in rows),
            covariates=self.covariates[rows],
            responses=self.responses[rows],
            trays=None if self.trays is None else self.trays[rows],
        )

    def without(self, index: int) -> "ExposureDataset":
        return self.subset([i for i in range(self.n_particles) if i != index])

    def equals(self, other: "ExposureDataset") -> bool:
        """Value equality, treating missing cells as equal."""
        same_trays = (self.trays is None and other.trays is None) or (
            self.trays is not None
            and other.trays is not None
            and np.array_equal(self.trays, other.trays)
        )
        same_controls = (self.controls is None and other.controls is None) or (
            self.controls is not None
            and other.controls is not None
            and _sorted_controls(self.controls).equals(_sorted_controls(other.controls))
        )
        return (
            self.particles == other.particles
            and self.covariate_names == other.covariate_names
            and self.log_scale == other.log_scale
            and np.array_equal(self.covariates, other.covariates)
            and self.dose_grid == other.dose_grid
            and self.time_grid == other.time_grid
            and np.array_equal(self.responses, other.responses, equal_nan=True)
            and same_trays
            and same_controls
        )


def _sorted_controls(frame: pd.DataFrame) -> pd.DataFrame:
    columns = [c for c in ("tray", "replicate", "dose", "time") if c in frame.columns]
    return frame.sort_values(columns).reset_index(drop=True)


def _data_line_numbers(path: Path) -> Tuple[List[int], List[str]]:
    """1-based line numbers of non-comment, non-blank lines, and the comment lines."""
    numbers, comments = [], []
    with path.open(encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                comments.append(stripped)
            else:
                numbers.append(number)
    return numbers, comments


def _read_table(path: Path) -> Tuple[pd.DataFrame, np.ndarray]:
    if not path.is_file():
        raise DatasetError("file not found", path=str(path))
    lines, _ = _data_line_numbers(path)
    try:
        frame = pd.read_csv(
            path, comment="#", dtype=str, skipinitialspace=True, keep_default_na=False
        )
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DatasetError(f"cannot parse CSV: {e}", path=str(path)) from e
    frame.columns = [str(c).strip() for c in frame.columns]
    # row r of the frame came from physical line lines[r + 1]
    return frame, np.asarray(lines[1 : len(frame) + 1], dtype=int)


def _numeric(
    frame: pd.DataFrame, column: str, path: Path, lines: np.ndarray, allow_missing: bool = False
) -> np.ndarray:
    raw = frame[column].str.strip()
    missing = raw.isin(["", "NA", "NaN", "nan"])
    values = pd.to_numeric(raw.where(~missing), errors="coerce")
    bad = values.isna() & ~missing
    if not allow_missing:
        bad |= missing
    if bad.any():
        raise DatasetError(
            f"non-numeric or missing '{column}' values", path=str(path), rows=lines[bad.to_numpy()]
        )
    return values.to_numpy(dtype=float)


def load_covariates(
    path: PathLike,
) -> Tuple[Tuple[str, ...], Tuple[str, ...], np.ndarray, Tuple[bool, ...]]:
    """Read a covariate table: particles, property names, matrix and log-scale flags."""
    path = Path(path)
    frame, lines = _read_table(path)
    if not frame.columns.size or frame.columns[0] != "particle":
        raise DatasetError("first column must be 'particle'", path=str(path), rows=[1])
    names = tuple(frame.columns[1:])
    if not names:
        raise DatasetError("no covariate columns", path=str(path))
    particles = frame["particle"].str.strip()
    duplicated = particles.duplicated(keep=False).to_numpy()
    if duplicated.any():
        raise DatasetError("duplicate particles", path=str(path), rows=lines[duplicated])
    matrix = np.column_stack([_numeric(frame, name, path, lines) for name in names])
    if not np.all(np.isfinite(matrix)):
        bad = ~np.isfinite(matrix).all(axis=1)
        raise DatasetError("covariates must be finite", path=str(path), rows=lines[bad])

    _, comments = _data_line_numbers(path)
    log_names: List[str] = []
    for comment in comments:
        if comment.lower().startswith(LOG_DIRECTIVE):
            listed = comment[len(LOG_DIRECTIVE) :].split(",")
            log_names.extend(n.strip() for n in listed if n.strip())
    unknown = sorted(set(log_names) - set(names))
    if unknown:
        raise DatasetError(f"#log: names unknown covariates {', '.join(unknown)}", path=str(path))
    log_scale = tuple(name in log_names for name in names)
    return tuple(particles), names, matrix, log_scale


def load_dataset(
    responses_path: PathLike, covariates_path: PathLike, control_label: str = "control"
) -> ExposureDataset:
    """Load and validate a dataset from the response and covariate CSVs.

    Raises:
        DatasetError: Naming the file and line numbers of the offending rows
    """
    particles, names, covariates, log_scale = load_covariates(covariates_path)
    path = Path(responses_path)
    frame, lines = _read_table(path)

    required = [c for c in RESPONSE_COLUMNS if c != "time"]
    absent = [c for c in required if c not in frame.columns]
    if absent:
        raise DatasetError(f"missing column(s) {', '.join(absent)}", path=str(path), rows=[1])
    frame = frame.copy()
    frame["particle"] = frame["particle"].str.strip()
    frame["replicate"] = frame["replicate"].str.strip()
    frame["dose"] = _numeric(frame, "dose", path, lines)
    frame["time"] = _numeric(frame, "time", path, lines) if "time" in frame.columns else 0.0
    frame["response"] = _numeric(frame, "response", path, lines, allow_missing=True)
    has_tray = "tray" in frame.columns
    if has_tray:
        frame["tray"] = frame["tray"].str.strip()
    frame["line"] = lines

    is_control = (frame["particle"] == control_label).to_numpy()
    unknown = ~is_control & ~frame["particle"].isin(particles).to_numpy()
    if unknown.any():
        missing = sorted(set(frame.loc[unknown, "particle"]))
        raise DatasetError(
            f"particle(s) not in {Path(covariates_path).name}: {', '.join(missing)}",
            path=str(path),
            rows=lines[unknown],
        )
    data = frame.loc[~is_control]
    key = ["particle", "replicate", "dose", "time"]
    duplicated = data.duplicated(key, keep=False).to_numpy()
    if duplicated.any():
        raise DatasetError("duplicate (particle, replicate, dose, time) rows", path=str(path),
                           rows=data["line"].to_numpy()[duplicated])
    without = sorted(set(particles) - set(data["particle"]))
    if without:
        raise DatasetError(f"no responses for particle(s) {', '.join(without)}", path=str(path))

    doses = np.unique(data["dose"].to_numpy())
    times = np.unique(data["time"].to_numpy())
    for particle, group in data.groupby("particle", sort=False):
        if not (np.array_equal(np.unique(group["dose"]), doses)
                and np.array_equal(np.unique(group["time"]), times)):
            raise DatasetError(
                f"particle '{particle}' is observed on a different dose/time grid",
                path=str(path),
                rows=group["line"].to_numpy(),
            )
    try:
        dose_grid = Grid1D(doses)
        time_grid = Grid1D(times) if times.size > 1 else None
    except SplineError as e:
        raise DatasetError(f"invalid grid: {e}", path=str(path)) from e

    replicate_order: Dict[str, List[str]] = {}
    for particle, replicate in zip(data["particle"], data["replicate"]):
        order = replicate_order.setdefault(particle, [])
        if replicate not in order:
            order.append(replicate)
    n_rep = max(len(v) for v in replicate_order.values())
    responses = np.full((len(particles), n_rep, doses.size, times.size), np.nan)
    trays = np.full((len(particles), n_rep), "", dtype=object) if has_tray else None
    p_index = {p: i for i, p in enumerate(particles)}
    d_index = np.searchsorted(doses, data["dose"].to_numpy())
    t_index = np.searchsorted(times, data["time"].to_numpy())
    for row, (particle, replicate) in enumerate(zip(data["particle"], data["replicate"])):
        i, k = p_index[particle], replicate_order[particle].index(replicate)
        responses[i, k, d_index[row], t_index[row]] = data["response"].iloc[row]
        if trays is not None:
            tray = data["tray"].iloc[row]
            if trays[i, k] not in ("", tray):
                raise DatasetError(
                    f"replicate '{replicate}' of '{particle}' spans several trays",
                    path=str(path),
                    rows=[int(data["line"].iloc[row])],
                )
            trays[i, k] = tray

    controls = None
    if is_control.any():
        columns = ["replicate", "dose", "time", "response"] + (["tray"] if has_tray else [])
        controls = frame.loc[is_control, columns].reset_index(drop=True)
    longest = max(replicate_order.values(), key=len)
    logger.info(
        "Loaded %d particles x %d replicates on %d doses x %d times (%d covariates)",
        len(particles), n_rep, doses.size, times.size, len(names),
    )
    try:
        return ExposureDataset(
            particles=particles,
            covariate_names=names,
            covariates=covariates,
            dose_grid=dose_grid,
            time_grid=time_grid,
            responses=responses,
            log_scale=log_scale,
            replicates=tuple(longest),
            trays=trays,
            controls=controls,
            control_label=control_label,
        )
    except DatasetError as e:
        raise DatasetError(str(e), path=str(path)) from e


def normalize_baseline(
    dataset: ExposureDataset, control_label: Optional[str] = None
) -> ExposureDataset:
    """Subtract the control-well mean of each tray (or globally) at every time.

    Control wells are normalized too, so applying this twice changes nothing.

    Raises:
        DatasetError: If there are no controls, or a tray or time has none
    """
    label = control_label or dataset.control_label
    controls = dataset.controls
    if controls is None or controls.empty:
        raise DatasetError(f"no control rows labelled '{label}'")
    times = [0.0] if dataset.time_grid is None else list(dataset.time_grid.values)
    by_tray = dataset.trays is not None and "tray" in controls.columns
    groups = ["tray", "time"] if by_tray else ["time"]
    if not by_tray and dataset.trays is not None:
        logger.warning("Controls carry no tray column; normalizing globally")
    ctrl = controls.copy()
    if dataset.time_grid is None:
        ctrl["time"] = 0.0
    means = ctrl.groupby(groups)["response"].mean()

    def baseline(tray: Optional[str], time: float) -> float:
        key = (tray, time) if by_tray else time
        if key not in means.index:
            where = f"tray '{tray}' at time {time:g}" if by_tray else f"time {time:g}"
            raise DatasetError(f"no control wells for {where}")
        return float(means.loc[key])

    responses = dataset.responses.copy()
    for i in range(dataset.n_particles):
        for k in range(dataset.n_replicates):
            tray = dataset.trays[i, k] if by_tray and dataset.trays is not None else None
            if by_tray and tray == "":
                continue
            for v, time in enumerate(times):
                responses[i, k, :, v] -= baseline(tray, time)

    shift = ctrl.apply(
        lambda row: baseline(row["tray"] if by_tray else None, float(row["time"])), axis=1
    )
    normalized_controls = controls.copy()
    normalized_controls["response"] = controls["response"] - shift.to_numpy()
    return replace(dataset, responses=responses, controls=normalized_controls, normalized=True)


def write_dataset(
    dataset: ExposureDataset, responses_path: PathLike, covariates_path: PathLike
) -> None:
    """Write a dataset in the long-format CSV layout read by :func:`load_dataset`."""
    covariates = pd.DataFrame(dataset.covariates, columns=list(dataset.covariate_names))
    covariates.insert(0, "particle", list(dataset.particles))
    flagged = [n for n, flag in zip(dataset.covariate_names, dataset.log_scale) if flag]
    with Path(covariates_path).open("w", encoding="utf-8", newline="") as handle:
        if flagged:
            handle.write(f"{LOG_DIRECTIVE} {','.join(flagged)}\n")
        covariates.to_csv(handle, index=False, float_format=lambda v: repr(float(v)))

    times = [0.0] if dataset.time_grid is None else list(dataset.time_grid.values)
    rows = []
    for i, particle in enumerate(dataset.particles):
        for k, replicate in enumerate(dataset.replicates):
            if np.isnan(dataset.responses[i, k]).all():
                continue
            for u, dose in enumerate(dataset.dose_grid.values):
                for v, time in enumerate(times):
                    row = {
                        "particle": particle,
                        "replicate": replicate,
                        "dose": float(dose),
                        "time": float(time),
                        "response": dataset.responses[i, k, u, v],
                    }
                    if dataset.trays is not None:
                        row["tray"] = dataset.trays[i, k]
                    rows.append(row)
    frame = pd.DataFrame(rows)
    if dataset.controls is not None:
        controls = dataset.controls.assign(particle=dataset.control_label)
        frame = pd.concat([frame, controls[[c for c in frame.columns if c in controls.columns]]])
    if dataset.time_grid is None:
        frame = frame.drop(columns="time")
    frame.to_csv(responses_path, index=False, float_format=lambda v: repr(float(v)), na_rep="")


def write_report_tables(tables: Mapping[str, pd.DataFrame], out_dir: PathLike) -> List[Path]:
    """Write tidy CSV tables as ``<out_dir>/tables/<name>.csv``."""
    target = Path(out_dir) / "tables"
    target.mkdir(parents=True, exist_ok=True)
    written = []
    for name, frame in tables.items():
        path = target / f"{name}.csv"
        frame.to_csv(path, index=False, float_format=lambda v: repr(float(v)))
        written.append(path)
    return written


def write_manifest(
    out_dir: PathLike, config: RunConfig, extra: Optional[Mapping[str, object]] = None
) -> Path:
    """Write ``run.cfg``: the resolved configuration plus run facts, flat ``key=value``."""
    path = Path(out_dir) / "run.cfg"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_config(config, path)
    if extra:
        with path.open("a", encoding="utf-8") as handle:
            handle.write("# run\n")
            for key, value in extra.items():
                handle.write(f"# {key}={value}\n")
    return path


@dataclass
class ReportLayout:
    """Output directory contract shared by every command."""

    root: Path
    tables: Path = field(init=False)
    figures: Path = field(init=False)
    chain: Path = field(init=False)
    checkpoint: Path = field(init=False)

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        self.tables = self.root / "tables"
        self.figures = self.root / "figures"
        self.chain = self.root / "chain" / "chain.bin"
        self.checkpoint = self.root / "chain" / "checkpoint.bin"

    def create(self) -> "ReportLayout":
        for directory in (self.tables, self.figures, self.chain.parent):
            directory.mkdir(parents=True, exist_ok=True)
        return self
