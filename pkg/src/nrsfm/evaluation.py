"""Scoring against synthetic ground truth and the noise/outlier sweep.

Reprojection variance is the mean squared reprojection error per point,
``mean ||x_hat_ij - x_ij||^2`` against the clean tracks, taken over cells
that were not replaced by outliers. It is a per-point quantity in image
units squared (the sum over both coordinates), not a per-coordinate one.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from .errors import AlignmentError, NRSFMError
from .robust import Reconstruction, RobustConfig, robust_reconstruct
from .synth import SceneConfig, SceneGroundTruth, make_benchmark

VARIANCE_DEFINITION = (
    "mean over ground-truth inlier cells of the squared Euclidean distance "
    "between reprojected and clean image points (image units^2, per point)"
)
CSV_COLUMNS = ["method", "noise_sigma", "outlier_ratio", "trials", "mean_variance", "std_variance", "failures"]
METHODS = ("direct", "robust")


def _prediction(recon) -> np.ndarray:
    if isinstance(recon, Reconstruction):
        return recon.reproject()
    return np.asarray(recon, dtype=float)


def reprojection_variance(gt: SceneGroundTruth, recon) -> float:
    """Mean squared reprojection error on ground-truth inlier cells.

    Args:
        gt: ground truth with clean tracks and the outlier mask.
        recon: a :class:`Reconstruction` or a predicted ``(2m, n)`` matrix.
    """
    P = _prediction(recon)
    clean = gt.clean_tracking.values
    if P.shape != clean.shape:
        raise ValueError(f"prediction is {P.shape}, ground truth {clean.shape}")
    d = P - clean
    sq = d[0::2] ** 2 + d[1::2] ** 2
    keep = ~gt.outlier_mask
    if not keep.any():
        return float("nan")
    return float(np.mean(sq[keep]))


def reprojection_rms(W, recon, mask=None) -> float:
    """Root mean squared point error against observations ``W``."""
    P = _prediction(recon)
    d = W.values - P
    sq = d[0::2] ** 2 + d[1::2] ** 2
    keep = W.mask if mask is None else (np.asarray(mask, dtype=bool) & W.mask)
    if not keep.any():
        return float("nan")
    return float(np.sqrt(np.mean(sq[keep])))


def _diameter(X) -> float:
    pts = X.T
    if pts.shape[0] > 64:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    return float(np.max(pdist(pts)))


@dataclass(frozen=True)
class SimilarityAlignment:
    """``gt ~ scale * rotation @ est + translation``; ``error`` is the mean
    point distance after alignment divided by the ground-truth diameter."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    error: float


def align_similarity(est, gt, allow_reflection: bool = False) -> SimilarityAlignment:
    """Closed-form least-squares similarity from ``est`` onto ``gt``.

    Rotations are proper unless ``allow_reflection`` is set, so a mirrored
    estimate is not forgiven by default.

    Raises:
        AlignmentError: fewer than 3 points or collinear ground truth.
    """
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[0] != 3:
        raise ValueError(f"need two 3 x n point sets, got {est.shape} and {gt.shape}")
    n = gt.shape[1]
    if n < 3:
        raise AlignmentError(f"need at least 3 points, got {n}")
    mu_e = est.mean(axis=1, keepdims=True)
    mu_g = gt.mean(axis=1, keepdims=True)
    Xe, Xg = est - mu_e, gt - mu_g
    sg = np.linalg.svd(Xg, compute_uv=False)
    if sg[1] <= 1e-12 * max(sg[0], 1e-300):
        raise AlignmentError("ground truth points are collinear or coincident")
    U, S, Vt = np.linalg.svd(Xg @ Xe.T)
    D = np.ones(3)
    if not allow_reflection and np.linalg.det(U @ Vt) < 0:
        D[2] = -1.0
    R = (U * D) @ Vt
    var_e = float(np.sum(Xe**2))
    scale = float(np.sum(S * D) / var_e) if var_e > 0 else 0.0
    t = (mu_g - scale * R @ mu_e).ravel()
    aligned = scale * R @ est + t[:, None]
    err = float(np.mean(np.linalg.norm(aligned - gt, axis=0)) / _diameter(gt))
    return SimilarityAlignment(scale, R, t, err)


def shape_error(est_shapes, gt_shapes):
    """Sequence 3D error after one global similarity.

    Each frame is centred first: under affine cameras a frame's depth
    offset is unobservable. Both chiralities are tried because affine
    images cannot tell a scene from its mirror image; the better one is
    reported.

    Returns:
        (error, mirrored)
    """
    est = np.asarray(est_shapes, dtype=float)
    gt = np.asarray(gt_shapes, dtype=float)
    if est.shape != gt.shape:
        raise ValueError(f"shape sets differ: {est.shape} vs {gt.shape}")
    est = est - est.mean(axis=2, keepdims=True)
    gt = gt - gt.mean(axis=2, keepdims=True)
    Xe = est.transpose(1, 0, 2).reshape(3, -1)
    Xg = gt.transpose(1, 0, 2).reshape(3, -1)
    proper = align_similarity(Xe, Xg)
    mirror = align_similarity(Xe * np.array([[1.0], [1.0], [-1.0]]), Xg)
    if mirror.error < proper.error:
        return mirror.error, True
    return proper.error, False


@dataclass(frozen=True)
class DetectionScores:
    precision: float
    recall: float
    precision_defined: bool = True


def detection_scores(inlier_mask, outlier_mask, observed=None) -> DetectionScores:
    """Precision and recall of the rejected set against injected outliers.

    With nothing rejected, precision is NaN and ``precision_defined`` is
    False. With nothing injected, recall is NaN.
    """
    inl = np.asarray(inlier_mask, dtype=bool)
    out = np.asarray(outlier_mask, dtype=bool)
    if inl.shape != out.shape:
        raise ValueError(f"mask shapes differ: {inl.shape} vs {out.shape}")
    rejected = ~inl if observed is None else (np.asarray(observed, dtype=bool) & ~inl)
    tp = int(np.sum(rejected & out))
    n_rej = int(rejected.sum())
    n_out = int(out.sum())
    precision = tp / n_rej if n_rej else float("nan")
    recall = tp / n_out if n_out else float("nan")
    return DetectionScores(precision, recall, n_rej > 0)


@dataclass
class MetricsReport:
    """Scores of one reconstruction. Fields that need data not supplied
    (Euclidean shapes, an outlier mask) are None."""

    reproj_variance_inliers: float
    reproj_rms: float
    shape_error: float | None = None
    shape_mirrored: bool | None = None
    detection_precision: float | None = None
    detection_recall: float | None = None
    precision_defined: bool | None = None
    audit: list = field(default_factory=list)
    variance_definition: str = VARIANCE_DEFINITION

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, val in d.items():
            if isinstance(val, float) and not math.isfinite(val):
                d[key] = None
        d["format_version"] = 1
        return d


def evaluate(gt: SceneGroundTruth, recon: Reconstruction, W=None) -> MetricsReport:
    """All metrics of ``recon`` against ``gt``; ``W`` is the corrupted input
    used for the RMS (defaults to the clean tracks)."""
    W = gt.clean_tracking if W is None else W
    rep = MetricsReport(
        reproj_variance_inliers=reprojection_variance(gt, recon),
        reproj_rms=reprojection_rms(W, recon, recon.inlier_mask),
        audit=list(recon.audit),
    )
    if recon.euclidean is not None:
        rep.shape_error, rep.shape_mirrored = shape_error(recon.euclidean.shapes, gt.shapes)
    scores = detection_scores(recon.inlier_mask, gt.outlier_mask, W.mask)
    rep.detection_precision = scores.precision
    rep.detection_recall = scores.recall
    rep.precision_defined = scores.precision_defined
    return rep


@dataclass(frozen=True)
class SweepRow:
    method: str
    noise_sigma: float
    outlier_ratio: float
    trials: int
    mean_variance: float
    std_variance: float
    failures: int

    def as_list(self):
        return [
            self.method,
            repr(float(self.noise_sigma)),
            repr(float(self.outlier_ratio)),
            str(self.trials),
            repr(float(self.mean_variance)),
            repr(float(self.std_variance)),
            str(self.failures),
        ]


def _run_trial(args):
    scene, k, cfg, methods = args
    W, gt = make_benchmark(scene)
    out = {}
    for method in methods:
        try:
            rec = robust_reconstruct(W, k, cfg, upgrade=False, reject=(method == "robust"))
            out[method] = (reprojection_variance(gt, rec), None)
        except (NRSFMError, np.linalg.LinAlgError) as exc:
            out[method] = (None, getattr(exc, "exit_code", 5))
    return out


def sweep(
    noise_levels,
    ratios,
    seeds,
    methods=METHODS,
    k: int = 2,
    scene: SceneConfig = SceneConfig(),
    cfg: RobustConfig = RobustConfig(),
    jobs: int = 1,
):
    """Mean and standard deviation of the reprojection variance per grid cell.

    Every ``(noise, ratio, seed)`` scene is generated once and shared by the
    methods. ``direct`` is the plain rank-``3k+1`` factorization, ``robust``
    the full rejection pipeline. Trials that raise are counted in
    ``failures`` and excluded from the statistics. Results are reduced in
    grid order, so the output does not depend on ``jobs``.

    Returns:
        (list of SweepRow, error code of the first failed trial or None)
    """
    noise_levels = [float(s) for s in noise_levels]
    ratios = [float(r) for r in ratios]
    seeds = [int(s) for s in seeds]
    methods = tuple(methods)
    if not noise_levels or not ratios or not seeds or not methods:
        raise ValueError("sweep grids must be non-empty")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")

    tasks = [
        (replace(scene, noise_sigma=s, outlier_ratio=r, seed=seed), k, cfg, methods)
        for s in noise_levels
        for r in ratios
        for seed in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_trial, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_run_trial(t) for t in tasks]

    first_code = None
    rows = []
    per_cell = len(seeds)
    for method in methods:
        for a, s in enumerate(noise_levels):
            for b, r in enumerate(ratios):
                start = (a * len(ratios) + b) * per_cell
                vals, fails = [], 0
                for res in results[start : start + per_cell]:
                    v, code = res[method]
                    if v is None:
                        fails += 1
                        first_code = first_code or code
                    else:
                        vals.append(v)
                mean = float(np.mean(vals)) if vals else float("nan")
                std = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else float("nan"))
                rows.append(SweepRow(method, s, r, per_cell, mean, std, fails))
    return rows, first_code


def format_sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow(row.as_list())
    return buf.getvalue()
