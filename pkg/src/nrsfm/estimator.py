"""Scikit-learn style wrapper around :func:`robust_reconstruct`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive_int, check_tracking
from .factor import SolverConfig
from .robust import RobustConfig, robust_reconstruct
from .upgrade import UpgradeConfig


class NonrigidFactorization(TransformerMixin, BaseEstimator):
    """Nonrigid reconstruction from a tracking matrix.

    ``X`` is a :class:`TrackingMatrix` or a ``(2m, n)`` array with NaN marking
    missing points. Fitting runs the full pipeline; ``transform`` returns the
    per-frame 3D shapes and ``predict`` the reprojected tracks.

    Args:
        n_bases: number of shape bases ``k``.
        method: ``"robust"`` rejects outliers, ``"direct"`` does not.
        augmented: rank ``3k+1`` factorization of raw tracks; otherwise
            centroid registration and rank ``3k``.
        upgrade: run the metric upgrade (needed for ``transform``).
        threshold_multiplier, rejection_rounds, weight_floor, anneal,
        kernel_divisor, residual_floor: see :class:`RobustConfig`.
        tol, max_iters: see :class:`SolverConfig`.
        n_starts, seed: see :class:`UpgradeConfig`.

    Attributes:
        reconstruction_: the :class:`Reconstruction`.
        inlier_mask_: ``(m, n)`` retained cells.
        shapes_: ``(m, 3, n)`` shapes, or None without upgrade.
        n_frames_, n_points_: fitted dimensions.
    """

    def __init__(
        self,
        n_bases=1,
        method="robust",
        augmented=True,
        upgrade=True,
        threshold_multiplier=7.0,
        rejection_rounds=20,
        weight_floor=0.0,
        anneal=0.5,
        kernel_divisor=3.0,
        residual_floor=1e-9,
        tol=1e-8,
        max_iters=500,
        n_starts=12,
        seed=0,
    ):
        self.n_bases = n_bases
        self.method = method
        self.augmented = augmented
        self.upgrade = upgrade
        self.threshold_multiplier = threshold_multiplier
        self.rejection_rounds = rejection_rounds
        self.weight_floor = weight_floor
        self.anneal = anneal
        self.kernel_divisor = kernel_divisor
        self.residual_floor = residual_floor
        self.tol = tol
        self.max_iters = max_iters
        self.n_starts = n_starts
        self.seed = seed

    def _configs(self):
        cfg = RobustConfig(
            threshold_multiplier=self.threshold_multiplier,
            rejection_rounds=self.rejection_rounds,
            weight_floor=self.weight_floor,
            anneal=self.anneal,
            kernel_divisor=self.kernel_divisor,
            residual_floor=self.residual_floor,
            solver=SolverConfig(tol=self.tol, max_iters=self.max_iters),
        )
        return cfg, UpgradeConfig(n_starts=self.n_starts, seed=self.seed)

    def fit(self, X, y=None):
        k = check_positive_int(self.n_bases, "n_bases")
        if self.method not in ("robust", "direct"):
            raise ValueError(f"method must be 'robust' or 'direct', got {self.method!r}")
        W = check_tracking(X)
        cfg, ucfg = self._configs()
        rec = robust_reconstruct(
            W, k, cfg, augmented=self.augmented, upgrade=self.upgrade, upgrade_cfg=ucfg,
            reject=self.method == "robust",
        )
        self.reconstruction_ = rec
        self.inlier_mask_ = rec.inlier_mask
        self.shapes_ = None if rec.euclidean is None else rec.euclidean.shapes
        self.n_frames_, self.n_points_ = W.frames, W.points
        return self

    def _check_dims(self, X):
        W = check_tracking(X)
        if (W.frames, W.points) != (self.n_frames_, self.n_points_):
            raise ValueError(
                f"X is {W.frames}x{W.points}, fitted on {self.n_frames_}x{self.n_points_}"
            )
        return W

    def transform(self, X):
        """Per-frame shapes ``(m, 3, n)`` of the fitted sequence."""
        check_is_fitted(self, "reconstruction_")
        self._check_dims(X)
        if self.shapes_ is None:
            raise ValueError("fitted with upgrade=False; no Euclidean shapes")
        return np.array(self.shapes_)

    def predict(self, X=None):
        """Reprojected ``(2m, n)`` tracking matrix."""
        check_is_fitted(self, "reconstruction_")
        if X is not None:
            self._check_dims(X)
        return self.reconstruction_.reproject()

    def score(self, X, y=None):
        """Negative mean squared point error on observed, retained cells."""
        check_is_fitted(self, "reconstruction_")
        W = self._check_dims(X)
        d = W.filled(0.0) - self.predict()
        sq = d[0::2] ** 2 + d[1::2] ** 2
        keep = W.mask & self.inlier_mask_
        return -float(np.mean(sq[keep])) if keep.any() else float("nan")
