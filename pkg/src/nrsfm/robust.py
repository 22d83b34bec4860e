"""Residual-based outlier rejection around the augmented factorization.

:func:`robust_reconstruct` runs the seven-step procedure:

1. rank-``r`` factorization of the raw tracks (``r = 3k+1``, or ``3k`` after
   centroid registration when ``augmented=False``);
2. residual matrix and a robust threshold ``tau = median + c * sigma_hat``;
3. rejection of cells above ``tau``, then a masked re-solve;
4. steps 2-3 again until the mask settles (see :class:`RobustConfig`);
5. Gaussian confidence weights from the final residuals and a weighted
   re-solve;
6. metric upgrade;
7. per-frame Euclidean shapes.

Every re-solve is warm-started from the previous factors, so the recorded
objective never increases from stage 3 onward. Rejected cells become
missing data; they are never imputed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NRSFMError, OverRejectionError, SolvabilityError, StatisticsError
from .factor import (
    Factorization,
    SolverConfig,
    WeightMatrix,
    alternating_factor,
    check_solvable,
    truncated_factor,
)
from .tracking import CentroidSet, TrackingMatrix, register_to_centroid
from .upgrade import EuclideanReconstruction, UpgradeConfig, apply_upgrade, recover_upgrade, with_translations

MAD_SCALE = 1.4826
MIN_CELLS = 8


@dataclass(frozen=True)
class RobustConfig:
    """Rejection and weighting settings.

    Rejection passes repeat, at most ``rejection_rounds`` times, until the
    inlier mask stops changing. Two safeguards keep a badly contaminated
    first fit from locking in its own errors:

    * ``anneal``: the threshold may shrink by at most this factor per pass,
      so the fit has a chance to improve before the threshold reaches the
      noise scale (0 disables);
    * ``kernel_divisor``: each re-solve weights retained cells by a Gaussian
      of width ``tau / kernel_divisor``, so cells just under the threshold
      pull less than clean ones (0 gives plain masked re-solves).

    Weights never increase from one pass to the next, exactly as the mask
    never regains cells; with warm starts this makes the recorded objective
    non-increasing.

    ``residual_floor`` is relative to the RMS magnitude of the observed
    coordinates. Thresholds never fall below it, and a robust scale below it
    counts as zero, so round-off residuals on exact data are never treated
    as evidence of outliers.
    """

    threshold_multiplier: float = 7.0
    rejection_rounds: int = 20
    weight_floor: float = 0.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    residual_floor: float = 1e-9
    anneal: float = 0.5
    kernel_divisor: float = 3.0

    @classmethod
    def two_pass(cls, **kw):
        """The plain schedule: two rejection passes with unweighted
        re-solves and the threshold rule applied as is."""
        base = dict(threshold_multiplier=2.5, rejection_rounds=2, anneal=0.0, kernel_divisor=0.0)
        base.update(kw)
        return cls(**base)

    def __post_init__(self):
        if not self.threshold_multiplier > 0:
            raise ValueError("threshold_multiplier must be positive")
        if self.rejection_rounds < 1:
            raise ValueError("rejection_rounds must be positive")
        if not 0 <= self.weight_floor <= 1:
            raise ValueError("weight_floor must be in [0, 1]")
        if not self.residual_floor >= 0:
            raise ValueError("residual_floor must be non-negative")
        if not 0 <= self.anneal < 1:
            raise ValueError("anneal must be in [0, 1)")
        if not self.kernel_divisor >= 0:
            raise ValueError("kernel_divisor must be non-negative")


@dataclass(frozen=True, eq=False)
class ResidualReport:
    """Residual matrix ``(2m, n)``, per-point norms ``(m, n)``, threshold.

    Unobserved cells hold NaN in both arrays.
    """

    residuals: np.ndarray
    norms: np.ndarray
    threshold: float
    sigma_hat: float


def _scale_floor(W: TrackingMatrix, cfg: RobustConfig) -> float:
    obs = W.values[W.row_mask]
    if obs.size == 0:
        return 0.0
    return cfg.residual_floor * float(np.sqrt(np.mean(obs**2)))


def outlier_threshold(norms, mask, cfg: RobustConfig = RobustConfig(), floor: float = 0.0):
    """Robust threshold over the masked-in norms.

    ``sigma_hat = 1.4826 * MAD`` and ``tau = median + c * sigma_hat``, with
    ``tau`` raised to ``floor`` if needed.

    Returns:
        (tau, sigma_hat)

    Raises:
        StatisticsError: fewer than 8 masked-in cells.
    """
    r = np.asarray(norms, dtype=float)[np.asarray(mask, dtype=bool)]
    if r.size < MIN_CELLS:
        raise StatisticsError(f"{r.size} residuals, need at least {MIN_CELLS} for a robust scale")
    med = float(np.median(r))
    sigma_hat = MAD_SCALE * float(np.median(np.abs(r - med)))
    tau = med + cfg.threshold_multiplier * sigma_hat
    return max(tau, floor), sigma_hat


def residual_matrix(
    W: TrackingMatrix, F: Factorization, mask=None, cfg: RobustConfig = RobustConfig()
) -> ResidualReport:
    """Residuals of ``F`` on every observed cell of ``W``.

    The threshold is estimated from the cells in ``mask`` (default: all
    observed cells), so a report can score rejected cells against the
    statistics of the retained ones.
    """
    if F.motion.shape[0] != W.values.shape[0] or F.shape.shape[1] != W.points:
        raise ValueError("factorization dimensions do not match the tracking matrix")
    E = np.where(W.row_mask, W.values - F.product(), np.nan)
    norms = np.hypot(E[0::2], E[1::2])
    mask = W.mask if mask is None else np.asarray(mask, dtype=bool) & W.mask
    tau, sigma_hat = outlier_threshold(norms, mask, cfg, floor=_scale_floor(W, cfg))
    return ResidualReport(E, norms, tau, sigma_hat)


def reject_outliers(mask, norms, tau: float, rank: int | None = None):
    """Keep masked-in cells whose norm is at most ``tau``.

    Raises:
        OverRejectionError: if every cell is rejected, or ``rank`` is given
            and the result no longer meets the factorization solvability
            guard.
    """
    mask = np.asarray(mask, dtype=bool)
    norms = np.asarray(norms, dtype=float)
    if mask.shape != norms.shape:
        raise ValueError("mask and norms must have the same shape")
    with np.errstate(invalid="ignore"):
        out = mask & (norms <= tau)
    if mask.any() and not out.any():
        raise OverRejectionError(f"threshold {tau:.6g} rejects every observed cell")
    if rank is not None:
        try:
            check_solvable(out, rank)
        except SolvabilityError as exc:
            raise OverRejectionError(
                f"rejection at threshold {tau:.6g} leaves the problem unsolvable ({exc}); "
                "use a larger threshold multiplier"
            ) from None
    return out


def estimate_weights(
    report: ResidualReport, mask, cfg: RobustConfig = RobustConfig(), floor: float = 0.0
) -> WeightMatrix:
    """Gaussian confidence ``max(weight_floor, exp(-r^2 / (2 sigma_hat^2)))``.

    Masked-out cells get 0. A robust scale at or below ``floor`` is treated
    as zero and every masked-in cell gets weight 1.
    """
    mask = np.asarray(mask, dtype=bool)
    if not report.sigma_hat > floor:
        return WeightMatrix(mask.astype(float))
    r = np.where(mask, report.norms, 0.0)
    w = np.maximum(cfg.weight_floor, np.exp(-(r**2) / (2 * report.sigma_hat**2)))
    return WeightMatrix(np.where(mask, w, 0.0))


@dataclass(frozen=True, eq=False)
class Reconstruction:
    """Output of :func:`robust_reconstruct`.

    ``report`` scores every observed cell against the final factors, with
    the threshold taken from the retained cells. ``audit`` lists one entry
    per rejection round plus the weighted stage. ``centroids`` is set for
    the registered (rank ``3k``) pipeline, whose factors live in
    centroid-relative coordinates.
    """

    euclidean: EuclideanReconstruction | None
    factor: Factorization
    inlier_mask: np.ndarray
    report: ResidualReport
    iterations: int
    audit: list
    weights: WeightMatrix | None = None
    centroids: CentroidSet | None = None
    augmented: bool = True

    def reproject(self) -> np.ndarray:
        """Model prediction of the full ``(2m, n)`` tracking matrix."""
        P = self.factor.product()
        if self.centroids is not None:
            P = P + self.centroids.as_column()[:, None]
        return P


def _wrap(step, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except NRSFMError as exc:
        if exc.step is None:
            exc.step = step
        raise


def _audit_entry(stage, tau, sigma_hat, rejected, F):
    return {
        "stage": stage,
        "threshold": float(tau),
        "sigma_hat": float(sigma_hat),
        "rejected_count": int(np.sum(rejected)),
        "objective": float(F.residual_fro**2),
    }


def _initial_factor(W, r, cfg):
    if W.fully_observed:
        return truncated_factor(W, r)
    return alternating_factor(W, r, cfg=cfg.solver)


def robust_reconstruct(
    W: TrackingMatrix,
    k: int,
    cfg: RobustConfig = RobustConfig(),
    augmented: bool = True,
    upgrade: bool = True,
    upgrade_cfg: UpgradeConfig = UpgradeConfig(),
    reject: bool = True,
) -> Reconstruction:
    """Outlier-robust nonrigid reconstruction.

    Args:
        W: tracking matrix; its mask marks present observations.
        k: number of shape bases.
        augmented: factor the raw tracks at rank ``3k+1``. When False the
            tracks are registered to their observed centroids first and
            factored at rank ``3k``.
        upgrade: run the metric upgrade (steps 6-7). Reprojection does not
            depend on it.
        reject: run steps 2-5. When False the result is the plain
            factorization of step 1.

    Raises:
        NRSFMError: solvability, over-rejection, statistics and degeneracy
            errors, with ``step`` set to the failing step.
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    centroids = None
    if augmented:
        r = 3 * k + 1
        X = W
    else:
        r = 3 * k
        X, centroids = _wrap(1, register_to_centroid, W)
    if not r <= min(2 * W.frames, W.points):
        raise SolvabilityError(f"rank {r} exceeds the matrix size {2 * W.frames}x{W.points}", step=1)
    _wrap(1, check_solvable, W.mask, r)

    F = _wrap(1, _initial_factor, X, r, cfg)
    floor = _scale_floor(X, cfg)
    mask = X.mask
    audit = []
    iterations = F.iterations
    weights = None

    if reject:
        w = mask.astype(float)
        tau_prev = np.inf
        for rnd in range(cfg.rejection_rounds):
            step = 2 if rnd == 0 else 4
            rep = _wrap(step, residual_matrix, X.with_mask(mask), F, cfg=cfg)
            tau = rep.threshold
            if cfg.anneal > 0:
                tau = max(tau, cfg.anneal * tau_prev) if np.isfinite(tau_prev) else tau
            new_mask = _wrap(3 if rnd == 0 else 4, reject_outliers, mask, rep.norms, tau, r)
            new_w = np.where(new_mask, w, 0.0)
            if cfg.kernel_divisor > 0:
                s = tau / cfg.kernel_divisor
                kern = np.exp(-(np.nan_to_num(rep.norms) ** 2) / (2 * s * s)) if s > 0 else 1.0
                new_w = np.minimum(new_w, kern)
            settled = np.array_equal(new_mask, mask) and tau == rep.threshold
            if not (settled and np.array_equal(new_w, w)):
                F = _wrap(3, alternating_factor, X.with_mask(new_mask), r, init=F, weights=new_w, cfg=cfg.solver)
                iterations += F.iterations
            mask, w, tau_prev = new_mask, new_w, tau
            audit.append(_audit_entry(f"reject-{rnd + 1}", tau, rep.sigma_hat, X.mask & ~mask, F))
            if settled:
                break
        rep = _wrap(5, residual_matrix, X.with_mask(mask), F, cfg=cfg)
        weights = WeightMatrix(np.minimum(w, estimate_weights(rep, mask, cfg, floor=floor).weights))
        F = _wrap(5, alternating_factor, X.with_mask(mask), r, init=F, weights=weights, cfg=cfg.solver)
        iterations += F.iterations
        audit.append(_audit_entry("weighted", rep.threshold, rep.sigma_hat, X.mask & ~mask, F))

    euclid = None
    if upgrade:
        H = _wrap(6, recover_upgrade, F, k, upgrade_cfg)
        euclid = _wrap(7, apply_upgrade, F, H, k)
        if centroids is not None:
            euclid = with_translations(euclid, centroids.centroids)

    report = residual_matrix(X, F, mask=mask, cfg=cfg)
    return Reconstruction(
        euclidean=euclid,
        factor=F,
        inlier_mask=mask,
        report=report,
        iterations=iterations,
        audit=audit,
        weights=weights,
        centroids=centroids,
        augmented=augmented,
    )

