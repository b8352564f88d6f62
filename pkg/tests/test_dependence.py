"""Tests for partial dependence."""

import numpy as np
import pytest

from dosetree.analytics import covariate_grid, partial_dependence, partial_dependence_2var
from dosetree.basis import SplineSystem
from dosetree.exceptions import SplineError
from dosetree.tree import Tree
from tests.helpers import constant_coeffs, make_fit, split_tree

COVARIATES = np.array([[0.1, 5.0], [0.4, 6.0], [0.6, 7.0], [0.9, 8.0]])


@pytest.fixture
def step_fit(system_1d: SplineSystem):
    """Every draw splits x1 at 0.5 into flat curves at 1 and 3."""
    tree = split_tree(0, 0.5, constant_coeffs(system_1d, 1.0), constant_coeffs(system_1d, 3.0))
    return make_fit(system_1d, COVARIATES, [tree] * 3)


def test_unused_variable_gives_flat_dependence(step_fit) -> None:
    pd_x2 = partial_dependence(step_fit, 1, np.linspace(5.0, 8.0, 7))

    assert pd_x2.values.shape == (7, 6)
    assert np.ptp(pd_x2.values, axis=0).max() == 0.0
    # two particles on each side of the split
    np.testing.assert_allclose(pd_x2.values, 2.0, atol=1e-12)


def test_split_variable_steps_at_threshold(step_fit) -> None:
    grid = np.array([0.1, 0.5, 0.51, 0.9])

    values = partial_dependence(step_fit, 0, grid).values

    np.testing.assert_allclose(values[:, 0], [1.0, 1.0, 3.0, 3.0], atol=1e-12)


def test_average_over_draws(system_1d: SplineSystem) -> None:
    trees = [
        Tree.stump().with_leaf_coeffs([constant_coeffs(system_1d, level)]) for level in (1.0, 3.0)
    ]
    fit = make_fit(system_1d, COVARIATES, trees)

    values = partial_dependence(fit, 0, np.array([0.2, 0.8])).values

    np.testing.assert_allclose(values, 2.0, atol=1e-12)


def test_single_point(step_fit) -> None:
    result = partial_dependence(step_fit, 0, np.array([0.2, 0.8]), at=(3.0, None))

    assert result.values.shape == (2, 1)
    assert result.dose.tolist() == [3.0]
    with pytest.raises(SplineError):
        partial_dependence(step_fit, 0, np.array([0.2]), at=(2.0, None))


def test_two_variable_diagonal_matches_one_variable(step_fit) -> None:
    grid = np.linspace(0.1, 0.9, 5)

    joint = partial_dependence_2var(step_fit, 0, 0, (grid, grid))
    single = partial_dependence(step_fit, 0, grid)

    assert joint.values.shape == (5, 5, 6)
    np.testing.assert_allclose(joint.values[np.arange(5), np.arange(5)], single.values)
    assert joint.names == ("x1", "x1 (second)")


def test_two_variable_surface(step_fit) -> None:
    result = partial_dependence_2var(
        step_fit, 0, 1, (np.array([0.2, 0.8]), np.array([5.0, 8.0])), at=(0.0, None)
    )

    np.testing.assert_allclose(result.values[:, :, 0], [[1.0, 1.0], [3.0, 3.0]], atol=1e-12)
    frame = result.to_frame()
    assert list(frame.columns) == ["x1", "x2", "dose", "time", "value"]
    assert len(frame) == 4


def test_empty_grid(step_fit) -> None:
    with pytest.raises(ValueError):
        partial_dependence(step_fit, 0, np.array([]))
    with pytest.raises(ValueError):
        partial_dependence_2var(step_fit, 0, 1, (np.array([]), np.array([1.0])))


def test_covariate_grid(step_fit) -> None:
    linear = covariate_grid(step_fit, 1, size=4)
    np.testing.assert_allclose(linear, [5.0, 6.0, 7.0, 8.0])

    step_fit.log_scale = (False, True)
    geometric = covariate_grid(step_fit, 1, size=3)
    np.testing.assert_allclose(geometric, [5.0, np.sqrt(40.0), 8.0])

    with pytest.raises(ValueError):
        covariate_grid(step_fit, 0, size=1)


def test_max_draws(step_fit) -> None:
    result = partial_dependence(step_fit, 0, np.array([0.2]), max_draws=1)

    np.testing.assert_allclose(result.values, 1.0, atol=1e-12)
