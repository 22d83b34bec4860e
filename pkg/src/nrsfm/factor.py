"""Low-rank factorization of tracking matrices.

Three solvers share one result type:

* :func:`truncated_factor` - best rank-r approximation by SVD (complete data).
* :func:`alternating_factor` - masked, weighted alternating least squares.
* :func:`frobenius_error` - the masked, weighted fit criterion they minimise.

Weights multiply squared point residuals: the objective is
``sum_ij w_ij * ||x_ij - M_i s_j||^2`` over observed cells.

Reproducibility: every routine is deterministic for fixed inputs. Factors are
bit-identical across runs on the same machine and numpy/BLAS build; across
platforms they agree only to floating-point round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError, SolvabilityError
from .tracking import TrackingMatrix


@dataclass(frozen=True)
class SolverConfig:
    """Stopping rule for :func:`alternating_factor`."""

    tol: float = 1e-8
    max_iters: int = 500

    def __post_init__(self):
        if not self.tol >= 0:
            raise ValueError("tol must be non-negative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass(frozen=True, eq=False)
class Factorization:
    """Motion factor ``(2m, r)`` and shape factor ``(r, n)``.

    ``residual_fro`` is the square root of the masked, weighted objective at
    these factors. ``history`` holds the objective after initialisation and
    after every alternation sweep (empty for SVD).
    """

    motion: np.ndarray
    shape: np.ndarray
    residual_fro: float
    iterations: int = 0
    converged: bool = True
    history: tuple = field(default=(), repr=False)
    singular_values: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.motion.shape[1] != self.shape.shape[0]:
            raise ValueError("motion columns must equal shape rows")

    @property
    def rank(self) -> int:
        return self.shape.shape[0]

    def product(self) -> np.ndarray:
        return self.motion @ self.shape


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Per-point confidence in ``[0, 1]``, shape ``(m, n)``."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2:
            raise ValueError("weights must be a 2-D (m, n) array")
        if not np.all(np.isfinite(w)) or w.min(initial=0) < 0 or w.max(initial=0) > 1:
            raise ValueError("weights must be finite and within [0, 1]")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)


def _sign_fix(U, V):
    # Largest-magnitude entry of every left singular vector made positive.
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, V * signs[:, None]


def _balanced(U, s, Vt, r):
    U, Vt = _sign_fix(U[:, :r], Vt[:r])
    root = np.sqrt(s[:r])
    return U * root, root[:, None] * Vt


def truncated_factor(W: TrackingMatrix, r: int) -> Factorization:
    """Best rank-``r`` factorization of a fully observed matrix.

    The singular values are split evenly between the factors:
    ``M = U_r diag(s)^(1/2)`` and ``S = diag(s)^(1/2) V_r^T``.
    """
    if not W.fully_observed:
        raise PreconditionError("truncated_factor needs a fully observed matrix")
    if not 1 <= r <= min(W.values.shape):
        raise ValueError(f"rank must satisfy 1 <= r <= {min(W.values.shape)}, got {r}")
    U, s, Vt = np.linalg.svd(W.values, full_matrices=False)
    M, S = _balanced(U, s, Vt, r)
    resid = math.sqrt(float(np.sum(s[r:] ** 2)))
    return Factorization(M, S, resid, singular_values=s)


def _effective_weights(W: TrackingMatrix, weights) -> np.ndarray:
    if weights is None:
        w = np.ones(W.mask.shape)
    else:
        w = weights.weights if isinstance(weights, WeightMatrix) else np.asarray(weights, float)
        if w.shape != W.mask.shape:
            raise ValueError(f"weights must be {W.mask.shape}, got {w.shape}")
    return np.where(W.mask, w, 0.0)


def frobenius_error(W: TrackingMatrix, F: Factorization, weights=None) -> float:
    """Square root of ``sum w_ij ||x_ij - M_i s_j||^2`` over observed cells."""
    if F.motion.shape[0] != W.values.shape[0] or F.shape.shape[1] != W.points:
        raise ValueError("factorization dimensions do not match the tracking matrix")
    w = _effective_weights(W, weights)
    return math.sqrt(_objective(W.values, w, F.motion, F.shape))


def _objective(values, w, M, S) -> float:
    E = values - M @ S
    E = np.where(np.repeat(w > 0, 2, axis=0), E, 0.0)
    sq = E[0::2] ** 2 + E[1::2] ** 2
    return float(np.sum(w * sq))


def check_solvable(mask, r: int):
    """Raise :class:`SolvabilityError` unless every frame has at least ``r``
    observations and every point at least ``ceil(r/2)``.

    This is a practical guard against under-determined least-squares solves,
    not a completeness guarantee.
    """
    per_frame = mask.sum(axis=1)
    bad = np.flatnonzero(per_frame < r)
    if bad.size:
        i = int(bad[0])
        raise SolvabilityError(
            f"frame {i} has {int(per_frame[i])} observations, rank {r} needs {r}"
        )
    need = math.ceil(r / 2)
    per_point = mask.sum(axis=0)
    bad = np.flatnonzero(per_point < need)
    if bad.size:
        j = int(bad[0])
        raise SolvabilityError(
            f"point {j} is observed in {int(per_point[j])} frames, rank {r} needs {need}"
        )


def _solve_stack(A, B):
    try:
        return np.linalg.solve(A, B)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(A, hermitian=True) @ B


def _impute_init(values, w, r):
    # Fill unobserved cells with the frame centroid of observed cells.
    keep = np.repeat(w > 0, 2, axis=0)
    cnt = keep.sum(axis=1, keepdims=True)
    mean = np.where(keep, values, 0.0).sum(axis=1, keepdims=True) / np.maximum(cnt, 1)
    filled = np.where(keep, values, mean)
    U, s, Vt = np.linalg.svd(filled, full_matrices=False)
    return _balanced(U, s, Vt, r)


def alternating_factor(
    W: TrackingMatrix,
    r: int,
    init: Factorization | None = None,
    weights=None,
    cfg: SolverConfig = SolverConfig(),
) -> Factorization:
    """Masked, weighted rank-``r`` factorization by alternating least squares.

    Each sweep solves every frame's two motion rows with the shape fixed, then
    every point's shape column with the motion fixed. Both half-steps are
    exact minimisers, so the objective never increases. Iteration stops when
    the relative decrease falls below ``cfg.tol`` or after ``cfg.max_iters``
    sweeps; hitting the cap is reported through ``converged``, not raised.

    Cells with zero weight are treated exactly like missing cells, including
    during initialisation.
    """
    m, n = W.frames, W.points
    if not 1 <= r <= min(2 * m, n):
        raise ValueError(f"rank must satisfy 1 <= r <= {min(2 * m, n)}, got {r}")
    w = _effective_weights(W, weights)
    check_solvable(w > 0, r)

    X = np.where(np.repeat(w > 0, 2, axis=0), W.values, 0.0)
    X3 = X.reshape(m, 2, n)
    if init is None:
        M, S = _impute_init(W.values, w, r)
    else:
        if init.rank != r or init.motion.shape[0] != 2 * m or init.shape.shape[1] != n:
            raise ValueError("init factorization does not match the requested problem")
        M, S = np.array(init.motion), np.array(init.shape)

    f = _objective(W.values, w, M, S)
    history = [f]
    converged = f == 0.0
    it = 0
    while not converged and it < cfg.max_iters:
        it += 1
        # motion rows, frame by frame
        A = np.einsum("ij,aj,bj->iab", w, S, S)
        B = np.einsum("ij,icj,bj->ibc", w, X3, S)
        M = _solve_stack(A, B).transpose(0, 2, 1).reshape(2 * m, r)
        # shape columns, point by point
        M3 = M.reshape(m, 2, r)
        MtM = np.einsum("ica,icb->iab", M3, M3)
        C = np.einsum("ij,iab->jab", w, MtM)
        D = np.einsum("ij,ica,icj->ja", w, M3, X3)
        S = _solve_stack(C, D[:, :, None])[:, :, 0].T

        f_new = _objective(W.values, w, M, S)
        history.append(f_new)
        if f_new == 0.0 or (f - f_new) <= cfg.tol * f:
            converged = True
        f = f_new

    return Factorization(
        M, S, math.sqrt(f), iterations=it, converged=converged, history=tuple(history)
    )
