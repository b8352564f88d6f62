"""Tests for variance-based sensitivity indices."""

import logging

import numpy as np
import pytest

from dosetree.analytics import saltelli_indices, sensitivity_indices
from dosetree.basis import SplineSystem
from dosetree.exceptions import ConfigurationError
from dosetree.tree import Node, SplitRule, Tree
from tests.helpers import constant_coeffs, make_fit, split_tree

BOX = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0], [0.5, 0.5]])


def grid_tree(system: SplineSystem, weights: tuple) -> Tree:
    """Splits x1 then x2 at 0.5: the mean is w1 [x1 > 0.5] + w2 [x2 > 0.5]."""
    w1, w2 = weights

    def leaf(level: float) -> Node:
        return Node(coeffs=constant_coeffs(system, level))

    return Tree(
        Node(
            rule=SplitRule(0, 0.5),
            left=Node(rule=SplitRule(1, 0.5), left=leaf(0.0), right=leaf(w2)),
            right=Node(rule=SplitRule(1, 0.5), left=leaf(w1), right=leaf(w1 + w2)),
        )
    )


def test_estimators_on_a_linear_function(rng: np.random.Generator) -> None:
    """f = 2 x1 + x2 on the unit square has S = T = (0.8, 0.2)."""
    n = 50_000
    A, B = rng.uniform(size=(n, 2)), rng.uniform(size=(n, 2))
    AB = np.repeat(A[None], 2, axis=0)
    AB[0, :, 0], AB[1, :, 1] = B[:, 0], B[:, 1]

    def f(x: np.ndarray) -> np.ndarray:
        return (2 * x[..., 0] + x[..., 1])[..., None]

    first, total, var = saltelli_indices(f(A), f(B), f(AB))

    np.testing.assert_allclose(first.mean(axis=1)[:, 0] / var[0], [0.8, 0.2], atol=0.02)
    np.testing.assert_allclose(total.mean(axis=1)[:, 0] / var[0], [0.8, 0.2], atol=0.02)


def test_single_split_model(system_1d: SplineSystem, rng: np.random.Generator) -> None:
    tree = split_tree(0, 0.5, constant_coeffs(system_1d, 1.0), constant_coeffs(system_1d, 3.0))
    fit = make_fit(system_1d, BOX, [tree] * 4)

    report = sensitivity_indices(fit, n_base=4096, rng=rng)

    np.testing.assert_allclose(report.first, [1.0, 0.0], atol=0.05)
    np.testing.assert_allclose(report.total, [1.0, 0.0], atol=0.05)
    assert report.total[1] == 0.0
    assert report.ranking() == ("x1", "x2")
    assert report.n_draws == 4


def test_additive_model(system_1d: SplineSystem, rng: np.random.Generator) -> None:
    """Step effects with weights 2 and 1 split the variance 0.8 / 0.2."""
    fit = make_fit(system_1d, BOX, [grid_tree(system_1d, (2.0, 1.0))] * 2)

    report = sensitivity_indices(fit, n_base=4096, rng=rng)

    np.testing.assert_allclose(report.first, [0.8, 0.2], atol=0.05)
    np.testing.assert_allclose(report.total, [0.8, 0.2], atol=0.05)
    frame = report.to_frame()
    assert list(frame.columns) == ["variable", "S", "S_se", "T", "T_se", "flagged"]
    assert (frame["S_se"] > 0).all()


def test_per_point_mode(system_2d: SplineSystem, rng: np.random.Generator) -> None:
    fit = make_fit(system_2d, BOX, [grid_tree(system_2d, (2.0, 1.0))])

    report = sensitivity_indices(fit, n_base=8192, mode="per-point", rng=rng)
    frame = report.to_frame()

    assert report.point_first.shape == (2, 18)
    np.testing.assert_allclose(report.point_first[0], 0.8, atol=0.06)
    assert len(frame) == 2 * 18
    assert list(frame.columns) == ["variable", "dose", "time", "S", "T"]


def test_noise_attenuates_indices(system_1d: SplineSystem, rng: np.random.Generator) -> None:
    """Mean-surface variance 1 against sigma2 = 1 halves the indices."""
    tree = split_tree(0, 0.5, constant_coeffs(system_1d, 1.0), constant_coeffs(system_1d, 3.0))
    fit = make_fit(system_1d, BOX, [tree], sigma2=1.0)

    report = sensitivity_indices(fit, n_base=4096, rng=rng, include_noise=True)

    assert report.include_noise
    assert report.total[0] == pytest.approx(0.5, abs=0.05)
    np.testing.assert_allclose(report.point_total[0], 0.5, atol=0.05)


def test_flat_surface_gives_zero_indices(
    system_1d: SplineSystem, rng: np.random.Generator, caplog: pytest.LogCaptureFixture
) -> None:
    flat = Tree.stump().with_leaf_coeffs([constant_coeffs(system_1d, 2.0)])
    fit = make_fit(system_1d, BOX, [flat] * 3)

    with caplog.at_level(logging.WARNING):
        report = sensitivity_indices(fit, n_base=64, rng=rng)

    assert report.n_draws == 0
    assert not report.first.any() and not report.total.any()
    assert "flat mean surface" in caplog.text


def test_reproducible_with_seed(system_1d: SplineSystem) -> None:
    fit = make_fit(system_1d, BOX, [grid_tree(system_1d, (2.0, 1.0))])

    first = sensitivity_indices(fit, n_base=256, rng=np.random.default_rng(5))
    second = sensitivity_indices(fit, n_base=256, rng=np.random.default_rng(5))

    np.testing.assert_array_equal(first.first, second.first)


def test_invalid_settings(system_1d: SplineSystem) -> None:
    fit = make_fit(system_1d, BOX, [grid_tree(system_1d, (2.0, 1.0))])

    with pytest.raises(ConfigurationError):
        sensitivity_indices(fit, n_base=15)
    with pytest.raises(ConfigurationError):
        sensitivity_indices(fit, n_base=64, mode="sideways")  # type: ignore[arg-type]
