import numpy as np
import pytest

from nrsfm.errors import OverRejectionError, StatisticsError
from nrsfm.evaluation import detection_scores, reprojection_variance
from nrsfm.factor import Factorization, truncated_factor
from nrsfm.robust import (
    ResidualReport,
    RobustConfig,
    estimate_weights,
    outlier_threshold,
    reject_outliers,
    residual_matrix,
    robust_reconstruct,
)
from nrsfm.synth import SceneConfig, generate_scene, make_benchmark
from nrsfm.tracking import TrackingMatrix


def exact(seed=0):
    rng = np.random.default_rng(seed)
    M, S = rng.standard_normal((8, 3)), rng.standard_normal((3, 6))
    return TrackingMatrix.from_array(M @ S), Factorization(M, S, 0.0)


def test_residuals_exact_fit():
    W, F = exact()
    rep = residual_matrix(W, F)
    assert np.all(rep.norms < 1e-12)


def test_residual_pythagorean():
    W, F = exact()
    X = np.array(W.values)
    X[2, 4] += 3.0
    X[3, 4] += 4.0
    rep = residual_matrix(TrackingMatrix.from_array(X), F)
    assert rep.norms[1, 4] == pytest.approx(5.0)
    other = np.ones(rep.norms.shape, bool)
    other[1, 4] = False
    assert np.all(rep.norms[other] < 1e-12)


def test_residual_nan_for_unobserved():
    W, F = exact()
    mask = np.array(W.mask)
    mask[0, 0] = False
    rep = residual_matrix(W.with_mask(mask), F)
    assert np.isnan(rep.norms[0, 0]) and np.isnan(rep.residuals[0, 0])


def test_threshold_zero_spread():
    tau, sig = outlier_threshold(np.full((3, 4), 2.0), np.ones((3, 4), bool))
    assert sig == 0 and tau == 2.0


def test_threshold_mad_arithmetic():
    r = np.array([[1, 1, 1, 1, 1, 1, 1, 100.0]])
    tau, sig = outlier_threshold(r, np.ones_like(r, bool), RobustConfig.two_pass())
    assert tau == 1.0 and sig == 0.0
    assert not reject_outliers(np.ones_like(r, bool), r, tau)[0, 7]


def test_threshold_mad_consistency():
    x = np.random.default_rng(0).standard_normal((100, 100))
    _, sig = outlier_threshold(x, np.ones(x.shape, bool))
    assert 0.95 <= sig <= 1.05


def test_threshold_needs_cells():
    with pytest.raises(StatisticsError):
        outlier_threshold(np.ones((1, 5)), np.ones((1, 5), bool))


def test_reject_noop_and_overrejection():
    norms = np.random.default_rng(1).uniform(0.1, 1, (4, 5))
    mask = np.ones((4, 5), bool)
    assert np.array_equal(reject_outliers(mask, norms, 2.0), mask)
    with pytest.raises(OverRejectionError):
        reject_outliers(mask, norms, 0.0)


def test_reject_solvability_guard():
    norms = np.zeros((4, 6))
    norms[0, :4] = 10
    with pytest.raises(OverRejectionError):
        reject_outliers(np.ones((4, 6), bool), norms, 1.0, rank=3)


def test_weights_closed_form():
    norms = np.array([[0.0, 2.0, 5.0]])
    rep = ResidualReport(np.zeros((2, 3)), norms, 3.0, 2.0)
    mask = np.array([[True, True, False]])
    w = estimate_weights(rep, mask).weights
    assert w[0, 0] == 1.0
    assert w[0, 1] == pytest.approx(np.exp(-0.5))
    assert w[0, 2] == 0.0


def test_weights_floor():
    rep = ResidualReport(np.zeros((2, 2)), np.array([[0.0, 100.0]]), 1.0, 1.0)
    w = estimate_weights(rep, np.ones((1, 2), bool), RobustConfig(weight_floor=0.1)).weights
    assert w[0, 1] == 0.1


def test_clean_data_noop():
    W = generate_scene(SceneConfig(frames=40)).clean_tracking
    rob = robust_reconstruct(W, 2)
    direct = robust_reconstruct(W, 2, reject=False)
    assert rob.inlier_mask.all()
    assert all(e["rejected_count"] == 0 for e in rob.audit)
    np.testing.assert_allclose(rob.reproject(), direct.reproject(), atol=1e-8)


def test_detection_and_variance_at_ten_percent():
    W, gt = make_benchmark(SceneConfig(noise_sigma=3.0, outlier_ratio=0.1, seed=1))
    rob = robust_reconstruct(W, 2, upgrade=False)
    direct = robust_reconstruct(W, 2, upgrade=False, reject=False)
    sc = detection_scores(rob.inlier_mask, gt.outlier_mask)
    assert sc.precision >= 0.95 and sc.recall >= 0.95
    vr, vd = reprojection_variance(gt, rob), reprojection_variance(gt, direct)
    assert vr <= 1.5 * 3.0
    assert vd >= 3 * vr


def test_audit_monotone():
    W, _ = make_benchmark(SceneConfig(noise_sigma=2.0, outlier_ratio=0.2, seed=4, frames=50))
    rec = robust_reconstruct(W, 2, upgrade=False)
    kept = [e["rejected_count"] for e in rec.audit]
    obj = [e["objective"] for e in rec.audit[1:]]
    assert all(b >= a for a, b in zip(kept, kept[1:]))
    assert all(b <= a * (1 + 1e-9) + 1e-9 for a, b in zip(obj, obj[1:]))


def test_registered_pipeline_returns_translations():
    W, gt = make_benchmark(SceneConfig(frames=30))
    rec = robust_reconstruct(W, 2, augmented=False)
    assert rec.centroids is not None
    np.testing.assert_allclose(rec.reproject(), W.values, atol=1e-6)
    np.testing.assert_allclose(rec.euclidean.reproject(), W.values, atol=1e-6)


def test_two_pass_schedule():
    cfg = RobustConfig.two_pass()
    assert cfg.threshold_multiplier == 2.5 and cfg.rejection_rounds == 2
    assert cfg.anneal == 0 and cfg.kernel_divisor == 0


@pytest.mark.parametrize("kw", [dict(threshold_multiplier=-1), dict(rejection_rounds=0), dict(weight_floor=2)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        RobustConfig(**kw)


def test_threshold_equivariance():
    W, _ = make_benchmark(SceneConfig(noise_sigma=2.0, outlier_ratio=0.1, seed=6, frames=60))
    F = truncated_factor(W, 7)
    s = 3.7
    a = residual_matrix(W, F)
    b = residual_matrix(TrackingMatrix(W.values * s, W.mask), Factorization(F.motion * s, F.shape, 0.0))
    np.testing.assert_allclose(b.norms, s * a.norms, rtol=1e-9, atol=1e-9)
    assert b.threshold == pytest.approx(s * a.threshold, rel=1e-12)
    assert b.sigma_hat == pytest.approx(s * a.sigma_hat, rel=1e-12)
    r1 = robust_reconstruct(W, 2, upgrade=False)
    r2 = robust_reconstruct(TrackingMatrix(W.values * s, W.mask), 2, upgrade=False)
    assert np.array_equal(r1.inlier_mask, r2.inlier_mask)


def test_outlier_separation():
    # outliers displaced by at least 10 noise units from their true image point
    sigma, hits, trials = 1.0, 0, 100
    for seed in range(trials):
        W, gt = make_benchmark(SceneConfig(noise_sigma=sigma, outlier_ratio=0.1, seed=seed))
        rec = robust_reconstruct(W, 2, upgrade=False)
        d = W.values - gt.clean_tracking.values
        disp = np.hypot(d[0::2], d[1::2])
        far = gt.outlier_mask & (disp >= 10 * sigma)
        norms, tau = rec.report.norms, rec.report.threshold
        hits += norms[far].min() > tau > norms[~gt.outlier_mask].max()
    assert hits >= 0.9 * trials
