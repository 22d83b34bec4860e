import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrsfm.errors import PreconditionError, SolvabilityError
from nrsfm.factor import (
    Factorization,
    SolverConfig,
    WeightMatrix,
    alternating_factor,
    check_solvable,
    frobenius_error,
    truncated_factor,
)
from nrsfm.tracking import TrackingMatrix


def low_rank(m, n, r, seed=0):
    rng = np.random.default_rng(seed)
    return TrackingMatrix.from_array(rng.standard_normal((2 * m, r)) @ rng.standard_normal((r, n)))


def test_truncated_exact_low_rank():
    W = low_rank(10, 12, 4)
    F = truncated_factor(W, 4)
    assert F.residual_fro < 1e-9 * F.singular_values[0]


def test_truncated_forward_model(model):
    T = model(k=2)[0]
    F = truncated_factor(T, 7)
    d = T.values - F.product()
    assert np.sqrt(np.mean(d[0::2] ** 2 + d[1::2] ** 2)) < 1e-8


def test_truncated_balanced_and_deterministic():
    W = low_rank(6, 9, 3, seed=3)
    F1, F2 = truncated_factor(W, 3), truncated_factor(W, 3)
    assert np.array_equal(F1.motion, F2.motion)
    np.testing.assert_allclose(F1.motion.T @ F1.motion, F1.shape @ F1.shape.T, atol=1e-10)


def test_truncated_needs_full_data():
    W = TrackingMatrix.from_array(np.array([[1.0, np.nan], [1.0, np.nan]]))
    with pytest.raises(PreconditionError):
        truncated_factor(W, 1)


def test_als_matches_svd_optimum():
    rng = np.random.default_rng(1)
    W = TrackingMatrix.from_array(rng.standard_normal((20, 15)))
    F0 = truncated_factor(W, 4)
    F = alternating_factor(W, 4, init=F0)
    assert F.residual_fro**2 <= F0.residual_fro**2 * (1 + 1e-9)


def test_als_masked_forward_model(model):
    T = model(k=2, m=40, n=40)[0]
    rng = np.random.default_rng(2)
    mask = rng.random(T.mask.shape) >= 0.1
    F = alternating_factor(T.with_mask(mask), 7, cfg=SolverConfig(tol=1e-14, max_iters=2000))
    d = (T.values - F.product())
    sq = d[0::2] ** 2 + d[1::2] ** 2
    assert np.sqrt(np.mean(sq[mask])) < 1e-6


def test_zero_weight_cell_has_no_effect():
    W = low_rank(8, 10, 3, seed=4)
    vals = np.array(W.values)
    vals += np.random.default_rng(5).normal(0, 0.1, vals.shape)
    w = np.ones((8, 10))
    w[2, 3] = 0.0
    F1 = alternating_factor(TrackingMatrix.from_array(vals), 3, weights=WeightMatrix(w))
    vals[4:6, 3] += 1e3
    F2 = alternating_factor(TrackingMatrix.from_array(vals), 3, weights=WeightMatrix(w))
    np.testing.assert_allclose(F1.product(), F2.product(), atol=1e-12)


def test_frobenius_exact_and_one_cell():
    rng = np.random.default_rng(6)
    M, S = rng.standard_normal((6, 2)), rng.standard_normal((2, 5))
    F = Factorization(M, S, 0.0)
    assert frobenius_error(TrackingMatrix.from_array(M @ S), F) == pytest.approx(0, abs=1e-12)
    X = M @ S
    X[3, 2] += 0.75
    assert frobenius_error(TrackingMatrix.from_array(X), F) == pytest.approx(0.75)


def test_frobenius_ignores_masked_cells():
    rng = np.random.default_rng(7)
    M, S = rng.standard_normal((4, 1)), rng.standard_normal((1, 3))
    X = M @ S
    X[0, 0] = 1e6
    mask = np.ones((2, 3), bool)
    mask[0, 0] = False
    assert frobenius_error(TrackingMatrix(X, mask), Factorization(M, S, 0.0)) < 1e-12


def test_solvability_guard():
    mask = np.ones((4, 6), bool)
    mask[1, :4] = False
    with pytest.raises(SolvabilityError, match="frame 1"):
        check_solvable(mask, 3)
    mask = np.ones((4, 6), bool)
    mask[:3, 5] = False
    with pytest.raises(SolvabilityError, match="point 5"):
        check_solvable(mask, 3)


def test_als_is_deterministic():
    rng = np.random.default_rng(8)
    vals = rng.standard_normal((12, 9))
    vals[4, 2] = np.nan
    W = TrackingMatrix.from_array(vals)
    F1, F2 = alternating_factor(W, 3), alternating_factor(W, 3)
    assert F1.iterations == F2.iterations
    assert np.array_equal(F1.motion, F2.motion) and np.array_equal(F1.shape, F2.shape)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_als_history_monotone(seed, r):
    rng = np.random.default_rng(seed)
    m, n = 8, 10
    vals = rng.standard_normal((2 * m, n))
    mask = rng.random((m, n)) < 0.85
    mask[:, : r + 1] = True
    mask[: r + 1] = True
    w = rng.uniform(0.1, 1.0, (m, n))
    F = alternating_factor(TrackingMatrix(vals, mask), r, weights=w, cfg=SolverConfig(max_iters=50))
    h = np.array(F.history)
    assert np.all(np.diff(h) <= 1e-12 * np.maximum(h[:-1], 1.0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gauge_invariance(seed):
    rng = np.random.default_rng(seed)
    W = TrackingMatrix.from_array(rng.standard_normal((10, 8)))
    F = truncated_factor(W, 3)
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    G = Q @ np.diag(rng.uniform(0.5, 2.0, 3))
    F2 = Factorization(F.motion @ G, np.linalg.solve(G, F.shape), 0.0)
    e1, e2 = frobenius_error(W, F), frobenius_error(W, F2)
    assert abs(e1 - e2) <= 1e-9 * e1


def test_halving_weights_scales_error():
    rng = np.random.default_rng(9)
    W = TrackingMatrix.from_array(rng.standard_normal((8, 6)))
    F = truncated_factor(W, 2)
    w = rng.uniform(0.2, 1.0, (4, 6))
    assert frobenius_error(W, F, w / 2) == pytest.approx(frobenius_error(W, F, w) / np.sqrt(2), rel=1e-12)
