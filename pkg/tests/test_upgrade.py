import numpy as np
import pytest

from nrsfm.errors import DegenerateMotionError
from nrsfm.evaluation import shape_error
from nrsfm.factor import Factorization, truncated_factor
from nrsfm.model import AffineCamera, DeformationWeights, ShapeBases, build_tracking, compose_shapes
from nrsfm.synth import SceneConfig, generate_scene
from nrsfm.tracking import register_to_centroid
from nrsfm.upgrade import apply_upgrade, metric_residual, recover_upgrade


def upgraded(T, k, registered=False):
    if registered:
        T, _ = register_to_centroid(T)
        F = truncated_factor(T, 3 * k)
    else:
        F = truncated_factor(T, 3 * k + 1)
    H = recover_upgrade(F, k)
    return F, H, apply_upgrade(F, H, k)


@pytest.mark.parametrize("k", [1, 2])
def test_metric_constraints(model, k):
    T = model(k=k, m=30, n=25, seed=k)[0]
    F, H, rec = upgraded(T, k)
    M = rec.motion_matrix[:, : 3 * k]
    r1, r2 = M[0::2], M[1::2]
    n1 = np.linalg.norm(r1, axis=1)
    assert np.all(np.abs(n1 - np.linalg.norm(r2, axis=1)) < 1e-6 * n1)
    assert np.all(np.abs(np.sum(r1 * r2, axis=1)) < 1e-6 * n1**2)
    assert H.constraint_residual < 1e-6


@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("registered", [False, True])
def test_exact_shape_recovery(model, k, registered):
    T, *_, shapes = model(k=k, m=40, n=30, seed=10 + k)
    _, _, rec = upgraded(T, k, registered)
    err, _ = shape_error(rec.shapes, shapes)
    assert err < 1e-6
    if not registered:
        np.testing.assert_allclose(rec.reproject(), T.values, atol=1e-6)


def test_already_metric_motion_is_noop(model):
    T, cams, bases, W, R, _ = model(k=1, m=20, n=15)
    M = np.vstack([c.a for c in cams])
    F = Factorization(M, bases.stacked(), 0.0)
    H = recover_upgrade(F, 1)
    assert H.constraint_residual < 1e-9
    # H is a scaled orthogonal matrix
    G = H.h.T @ H.h
    np.testing.assert_allclose(G / G[0, 0], np.eye(3), atol=1e-9)


def test_identical_cameras_degenerate():
    rng = np.random.default_rng(0)
    cam = AffineCamera([[1, 0, 0], [0, 1, 0]], [0, 0])
    T = build_tracking([cam, cam], ShapeBases(rng.standard_normal((1, 3, 10))), DeformationWeights.rigid(2))
    F = truncated_factor(register_to_centroid(T)[0], 3)
    with pytest.raises(DegenerateMotionError):
        recover_upgrade(F, 1)


def test_rigid_weights_constant(model):
    T = model(k=1, m=25, n=20, varying_scale=True)[0]
    _, _, rec = upgraded(T, 1)
    w = rec.weights.weights[:, 0]
    assert np.ptp(w) < 1e-6 * abs(w[0])


def test_cube_scene_recovery():
    gt = generate_scene(SceneConfig(frames=60))
    _, H, rec = upgraded(gt.clean_tracking, 2)
    err, _ = shape_error(rec.shapes, gt.shapes)
    assert err < 1e-5
    assert np.max(metric_residual(rec.motion_matrix, 2)) < 1e-6


def test_upgrade_is_deterministic(model):
    T = model(k=2, seed=5)[0]
    F = truncated_factor(T, 7)
    assert np.array_equal(recover_upgrade(F, 2).h, recover_upgrade(F, 2).h)


def test_wrong_rank_rejected(model):
    T = model(k=2)[0]
    with pytest.raises(ValueError):
        recover_upgrade(truncated_factor(T, 5), 2)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_gauge_independent_of_search_seed(model, k):
    from nrsfm.upgrade import UpgradeConfig

    T = model(k=k, m=40, n=30, seed=20 + k)[0]
    F = truncated_factor(T, 3 * k + 1)
    H = [recover_upgrade(F, k, UpgradeConfig(seed=s)).h for s in range(4)]
    for h in H[1:]:
        np.testing.assert_allclose(h, H[0], atol=1e-8 * np.abs(H[0]).max())
    rec = apply_upgrade(F, recover_upgrade(F, k), k)
    np.testing.assert_allclose(rec.motions[0].rotation, np.eye(3), atol=1e-9)
