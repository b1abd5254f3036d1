import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import vectors
from pmforest.numerics import (as_vector, hard_threshold, make_rng, mat_vec, project_l1_ball, prox_linf,
                               soft_threshold, threshold)


def test_mat_vec_examples():
    np.testing.assert_array_equal(mat_vec(np.eye(3), [1, 2, 3]), [1, 2, 3])
    np.testing.assert_array_equal(mat_vec(np.zeros((2, 2)), [5, 7]), [0, 0])
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    x = np.array([1.0, 1.0])
    loop = [sum(A[i, j] * x[j] for j in range(2)) for i in range(2)]
    np.testing.assert_array_equal(mat_vec(A, x), loop)
    np.testing.assert_array_equal(mat_vec(A, x), [3, 7])


def test_mat_vec_dimension_mismatch():
    with pytest.raises(ValueError):
        mat_vec(np.eye(3), [1, 2])


def test_soft_threshold_examples():
    np.testing.assert_array_equal(soft_threshold([1, -2, 0.5], 0), [1, -2, 0.5])
    np.testing.assert_array_equal(soft_threshold([1, -2, 0.5], 1), [0, -1, 0])
    np.testing.assert_array_equal(soft_threshold([3.0], 0.5), [2.5])


def test_hard_threshold_examples():
    np.testing.assert_array_equal(hard_threshold([1, -2, 0.5], 0), [1, -2, 0.5])
    np.testing.assert_array_equal(hard_threshold([1, -2, 0.5], 1), [0, -2, 0])
    np.testing.assert_array_equal(hard_threshold([0.3, 0.7], 0.5), [0, 0.7])


@pytest.mark.parametrize("fn", [soft_threshold, hard_threshold])
def test_negative_beta_rejected(fn):
    with pytest.raises(ValueError):
        fn([1.0], -0.1)


def test_threshold_per_entry_beta():
    np.testing.assert_array_equal(threshold([1.0, 1.0], [0.5, 2.0], "soft"), [0.5, 0.0])
    with pytest.raises(ValueError):
        threshold([1.0], 0.1, "medium")


def test_project_l1_ball_examples():
    np.testing.assert_array_equal(project_l1_ball([0.2, 0.1], 1), [0.2, 0.1])
    np.testing.assert_array_equal(project_l1_ball([2.0, 0.0], 1), [1.0, 0.0])
    np.testing.assert_allclose(project_l1_ball([1.0, 1.0], 1), [0.5, 0.5], atol=1e-15)


def test_project_l1_ball_matches_grid_search():
    # dense grid over the l1 ball in 2-D; the grid point nearest (1, 1) is the projection
    g = np.linspace(-1, 1, 2001)
    U = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    U = U[np.abs(U).sum(1) <= 1 + 1e-12]
    v = np.array([1.0, 1.0])
    best = U[np.argmin(((U - v) ** 2).sum(1))]
    np.testing.assert_allclose(project_l1_ball(v, 1), best, atol=1e-3)


def test_project_l1_ball_rejects_bad_radius():
    with pytest.raises(ValueError):
        project_l1_ball([1.0], 0.0)


def test_prox_linf_examples():
    np.testing.assert_array_equal(prox_linf([0.0, 0.0], 1), [0.0, 0.0])
    # 1-D: prox of lam*|.| is scalar soft thresholding
    np.testing.assert_allclose(prox_linf([3.0, 0.0], 1), [2.0, 0.0])
    np.testing.assert_allclose(prox_linf([2.0, 2.0], 1), [1.5, 1.5])


def test_prox_linf_matches_grid_search():
    v = np.array([2.0, 2.0])
    g = np.linspace(0, 3, 3001)
    U = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    obj = 0.5 * ((U - v) ** 2).sum(1) + np.abs(U).max(1)
    np.testing.assert_allclose(prox_linf(v, 1), U[np.argmin(obj)], atol=2e-3)


def test_prox_linf_rejects_bad_lambda():
    with pytest.raises(ValueError):
        prox_linf([1.0], -1)


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        as_vector([1.0, np.nan])


@given(vectors(), st.floats(0.01, 20))
def test_moreau_identity(v, lam):
    np.testing.assert_allclose(prox_linf(v, lam) + project_l1_ball(v, lam), v, rtol=0, atol=1e-10)


@given(vectors(), st.floats(0.01, 20))
def test_projection_lands_in_ball_and_is_fixed(v, r):
    u = project_l1_ball(v, r)
    assert np.abs(u).sum() <= r + 1e-12
    np.testing.assert_allclose(project_l1_ball(u, r), u, atol=1e-12)


@given(vectors(), st.floats(0, 5), st.floats(0, 5))
def test_thresholds_shrink_monotonically(v, b1, b2):
    lo, hi = sorted((b1, b2))
    for fn in (soft_threshold, hard_threshold):
        assert np.all(np.abs(fn(v, hi)) <= np.abs(fn(v, lo)) + 0.0)
        np.testing.assert_array_equal(fn(v, 0), v)


def test_rng_reproducible():
    a = make_rng(7).standard_normal(100)
    b = make_rng(7).standard_normal(100)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        make_rng(None)
    with pytest.raises(ValueError):
        make_rng(-1)
