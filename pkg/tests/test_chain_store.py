"""Tests for the chain file."""

import math
import sqlite3
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dosetree.chain_store import (
    FORMAT_VERSION,
    ChainStore,
    CheckpointStore,
    dataset_fingerprint,
    load_fit,
    save_fit,
)
from dosetree.config import RunConfig
from dosetree.datastore import ExposureDataset
from dosetree.exceptions import ChainFormatError
from dosetree.sampler import ChainCheckpoint, PosteriorFit, fit_dataset


@pytest.fixture
def fit(small_dataset: ExposureDataset, quick_config: RunConfig) -> PosteriorFit:
    return fit_dataset(small_dataset, quick_config)


def test_save_and_load(fit: PosteriorFit, tmp_path: Path) -> None:
    path = save_fit(fit, tmp_path / "chain.bin")

    loaded = load_fit(path)

    assert len(loaded.chains) == len(fit.chains)
    for original, restored in zip(fit.chains, loaded.chains):
        assert restored.chain_id == original.chain_id
        assert restored.seed == original.seed
        assert restored.config == original.config
        assert restored.draws == original.draws
        assert restored.acceptance == original.acceptance
        np.testing.assert_array_equal(restored.log_post_trace, original.log_post_trace)
    assert loaded.particles == fit.particles
    assert loaded.covariate_names == fit.covariate_names
    assert loaded.log_scale == fit.log_scale
    assert loaded.settings == fit.settings
    np.testing.assert_array_equal(loaded.covariates, fit.covariates)
    np.testing.assert_array_equal(loaded.system.design, fit.system.design)
    np.testing.assert_array_equal(loaded.system.penalty, fit.system.penalty)


def test_saves_are_byte_identical(fit: PosteriorFit, tmp_path: Path) -> None:
    first = save_fit(fit, tmp_path / "a.bin")
    second = save_fit(fit, tmp_path / "b.bin")

    assert first.read_bytes() == second.read_bytes()


def test_save_replaces_existing_file(fit: PosteriorFit, tmp_path: Path) -> None:
    path = tmp_path / "chain.bin"
    save_fit(fit, path)
    fit.chains = fit.chains[:1]

    save_fit(fit, path)

    assert len(load_fit(path).chains) == 1


def test_missing_log_post_round_trips_as_nan(fit: PosteriorFit, tmp_path: Path) -> None:
    chain = fit.chains[0]
    chain.draws[0] = replace(chain.draws[0], log_post=math.nan)

    loaded = load_fit(save_fit(fit, tmp_path / "chain.bin"))

    assert math.isnan(loaded.chains[0].draws[0].log_post)
    assert loaded.chains[0].draws[1:] == chain.draws[1:]


def set_meta(path: Path, key: str, value: str) -> None:
    with sqlite3.connect(str(path)) as conn:
        conn.execute("UPDATE meta SET value = ? WHERE key = ?", (value, key))
    conn.close()


def test_bad_magic(fit: PosteriorFit, tmp_path: Path) -> None:
    path = save_fit(fit, tmp_path / "chain.bin")
    set_meta(path, "magic", "something-else")

    with pytest.raises(ChainFormatError, match="bad magic"):
        load_fit(path)


def test_other_format_version(fit: PosteriorFit, tmp_path: Path) -> None:
    path = save_fit(fit, tmp_path / "chain.bin")
    set_meta(path, "format_version", str(FORMAT_VERSION + 1))

    with pytest.raises(ChainFormatError, match="version"):
        ChainStore(path).read_meta()


def test_foreign_and_missing_files(tmp_path: Path) -> None:
    foreign = tmp_path / "notes.bin"
    foreign.write_text("particle,dose\n" * 100)

    with pytest.raises(ChainFormatError):
        load_fit(foreign)
    with pytest.raises(ChainFormatError, match="not found"):
        load_fit(tmp_path / "absent.bin")


def test_corrupt_draw_is_reported(fit: PosteriorFit, tmp_path: Path) -> None:
    path = save_fit(fit, tmp_path / "chain.bin")
    with sqlite3.connect(str(path)) as conn:
        conn.execute("UPDATE draws SET tree = 'branch' WHERE idx = 0")
    conn.close()

    with pytest.raises(ChainFormatError, match="Corrupt"):
        load_fit(path)


class Interrupted(Exception):
    pass


def test_checkpoint_file_resumes_every_chain(
    small_dataset: ExposureDataset, tmp_path: Path
) -> None:
    """Chains stopped at different sweeps finish with the draws of an uninterrupted fit."""
    config = RunConfig(iterations=60, burn_in=20, thin=2, n_chains=2, seed=7, checkpoint_every=10)
    fingerprint = dataset_fingerprint(small_dataset)
    store = CheckpointStore(tmp_path / "checkpoint.bin").create(fingerprint)

    def save_then_stop(checkpoint: ChainCheckpoint) -> None:
        store.save(checkpoint)
        if checkpoint.chain_id == 1 and checkpoint.sweep == 40:
            raise Interrupted

    with pytest.raises(Interrupted):
        fit_dataset(small_dataset, config, checkpoint=save_then_stop)
    saved = store.load(fingerprint)
    resumed = fit_dataset(small_dataset, config, checkpoint=store.save, resume=saved)
    straight = fit_dataset(small_dataset, config)

    assert {c: s.sweep for c, s in saved.items()} == {0: 50, 1: 40}
    assert saved[1].chain.n_draws == 10
    assert saved[1].chain.log_post_trace.shape == (40,)
    for a, b in zip(straight.chains, resumed.chains):
        assert b.draws == a.draws
        assert b.acceptance == a.acceptance
        np.testing.assert_array_equal(b.log_post_trace, a.log_post_trace)


def test_checkpoint_file_checks_its_dataset(
    small_dataset: ExposureDataset, tmp_path: Path
) -> None:
    path = tmp_path / "checkpoint.bin"
    store = CheckpointStore(path).create(dataset_fingerprint(small_dataset))
    other = dataset_fingerprint(small_dataset.without(0))

    assert store.load(dataset_fingerprint(small_dataset)) == {}
    with pytest.raises(ChainFormatError, match="different dataset"):
        store.load(other)
    store.remove()
    with pytest.raises(ChainFormatError, match="not found"):
        store.load(other)
