import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from nrsfm.errors import AlignmentError
from nrsfm.evaluation import (
    CSV_COLUMNS,
    align_similarity,
    detection_scores,
    evaluate,
    format_sweep_csv,
    reprojection_rms,
    reprojection_variance,
    shape_error,
    sweep,
)
from nrsfm.robust import robust_reconstruct
from nrsfm.synth import SceneConfig, generate_scene, make_benchmark


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneConfig(frames=20))


def test_variance_perfect_and_offset(scene):
    P = np.array(scene.clean_tracking.values)
    assert reprojection_variance(scene, P) == 0
    P[0::2] += 1.0
    assert reprojection_variance(scene, P) == pytest.approx(1.0)


def test_variance_excludes_outlier_cells():
    W, gt = make_benchmark(SceneConfig(frames=10, outlier_ratio=0.2))
    assert reprojection_variance(gt, W.values) == pytest.approx(0, abs=1e-20)
    assert reprojection_rms(W, W.values) == 0


def test_align_identity():
    X = np.random.default_rng(0).standard_normal((3, 20))
    a = align_similarity(X, X)
    assert a.error < 1e-12 and a.scale == pytest.approx(1)
    np.testing.assert_allclose(a.rotation, np.eye(3), atol=1e-12)


def test_align_similarity_recovery():
    rng = np.random.default_rng(1)
    gt = rng.standard_normal((3, 30))
    R = Rotation.random(random_state=rng).as_matrix()
    est = 2 * R @ gt + rng.standard_normal((3, 1))
    a = align_similarity(est, gt)
    assert a.error < 1e-10
    assert 1 / a.scale == pytest.approx(2)


def test_align_mirror_not_absorbed():
    gt = np.random.default_rng(2).standard_normal((3, 30))
    assert align_similarity(gt * np.array([[1], [1], [-1]]), gt).error > 1e-2
    assert align_similarity(gt * np.array([[1], [1], [-1]]), gt, allow_reflection=True).error < 1e-12


def test_align_degenerate():
    with pytest.raises(AlignmentError):
        align_similarity(np.zeros((3, 2)), np.zeros((3, 2)))
    line = np.outer([1.0, 2.0, 3.0], np.arange(5.0))
    with pytest.raises(AlignmentError):
        align_similarity(line, line)


def test_shape_error_mirror_flag(scene):
    err, mirrored = shape_error(scene.shapes * np.array([1, 1, -1])[:, None], scene.shapes)
    assert err < 1e-12 and mirrored


def test_shape_error_ignores_per_frame_offsets(scene):
    shifted = scene.shapes + np.random.default_rng(3).standard_normal((scene.frames, 3, 1))
    assert shape_error(shifted, scene.shapes)[0] < 1e-12


def test_detection_perfect_and_empty():
    out = np.zeros((3, 4), bool)
    out[1, 2] = out[0, 0] = True
    s = detection_scores(~out, out)
    assert (s.precision, s.recall) == (1.0, 1.0)
    s = detection_scores(np.ones((3, 4), bool), out)
    assert s.recall == 0 and np.isnan(s.precision) and not s.precision_defined


def test_evaluate_report():
    W, gt = make_benchmark(SceneConfig(frames=30, noise_sigma=1, outlier_ratio=0.1, seed=2))
    rep = evaluate(gt, robust_reconstruct(W, 2), W)
    d = rep.to_dict()
    assert d["format_version"] == 1
    assert d["shape_error"] < 0.05
    assert d["detection_precision"] >= 0.95 and d["detection_recall"] >= 0.95


def test_sweep_clean_cell():
    rows, code = sweep([0.0], [0.0], [0], scene=SceneConfig(frames=20))
    assert code is None and len(rows) == 2
    assert all(r.mean_variance < 1e-12 and r.failures == 0 for r in rows)


def test_sweep_layout_and_jobs_invariance():
    kw = dict(scene=SceneConfig(frames=50))
    rows1, _ = sweep([1.0, 2.0], [0.05, 0.2], [0, 1], **kw)
    rows2, _ = sweep([1.0, 2.0], [0.05, 0.2], [0, 1], jobs=2, **kw)
    text = format_sweep_csv(rows1)
    assert text == format_sweep_csv(rows2)
    lines = text.splitlines()
    assert lines[0].split(",") == CSV_COLUMNS and len(lines) == 9


def test_sweep_rejects_unknown_method():
    with pytest.raises(ValueError):
        sweep([1.0], [0.1], [0], methods=["magic"])
