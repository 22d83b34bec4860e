"""Shape-basis deformation model and affine imaging.

A frame's shape is a weighted sum of ``k`` basis shapes, imaged by an affine
camera ``x = A X + c``. :func:`build_tracking` is the forward model every
test in the package is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFrameError
from .tracking import TrackingMatrix


def _ro(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ShapeBases:
    """``k`` basis shapes stacked as an array of shape ``(k, 3, n)``."""

    bases: np.ndarray

    def __post_init__(self):
        b = _ro(self.bases)
        if b.ndim == 2:
            b = _ro(b[None])
        if b.ndim != 3 or b.shape[1] != 3 or b.shape[0] < 1:
            raise ValueError(f"bases must be (k, 3, n), got {b.shape}")
        if not np.all(np.isfinite(b)):
            raise ValueError("bases must be finite")
        object.__setattr__(self, "bases", b)

    @property
    def k(self) -> int:
        return self.bases.shape[0]

    @property
    def points(self) -> int:
        return self.bases.shape[2]

    def stacked(self) -> np.ndarray:
        """Bases as a ``(3k, n)`` shape matrix."""
        return self.bases.reshape(-1, self.points)


@dataclass(frozen=True, eq=False)
class DeformationWeights:
    """Per-frame basis weights, shape ``(m, k)``. Signed values are allowed."""

    weights: np.ndarray

    def __post_init__(self):
        w = _ro(self.weights)
        if w.ndim == 1:
            w = _ro(w[:, None])
        if w.ndim != 2 or not np.all(np.isfinite(w)):
            raise ValueError("weights must be a finite (m, k) array")
        object.__setattr__(self, "weights", w)

    @classmethod
    def rigid(cls, frames):
        return cls(np.ones((frames, 1)))


@dataclass(frozen=True, eq=False)
class AffineCamera:
    a: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        a, c = _ro(self.a), _ro(self.c).reshape(-1)
        if a.shape != (2, 3) or c.shape != (2,):
            raise ValueError("camera needs a (2, 3) matrix and a 2-vector")
        if np.linalg.matrix_rank(a) < 2:
            raise ValueError("affine camera matrix must have rank 2")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "c", _ro(c))


@dataclass(frozen=True, eq=False)
class EuclideanMotion:
    """Scaled-orthographic camera: ``x = scale * rotation[:2] X + translation``."""

    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def __post_init__(self):
        R = _ro(self.rotation)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "translation", _ro(self.translation).reshape(2))

    def camera(self) -> AffineCamera:
        return AffineCamera(self.scale * self.rotation[:2], self.translation)


def compose_shape(bases: ShapeBases, w_i) -> np.ndarray:
    """Weighted sum of the basis shapes for one frame, ``(3, n)``."""
    w_i = np.asarray(w_i, dtype=float).reshape(-1)
    if w_i.size != bases.k:
        raise ValueError(f"expected {bases.k} weights, got {w_i.size}")
    return np.tensordot(w_i, bases.bases, axes=1)


def compose_shapes(bases: ShapeBases, weights: DeformationWeights) -> np.ndarray:
    """Shapes of every frame, ``(m, 3, n)``."""
    if weights.weights.shape[1] != bases.k:
        raise ValueError("weights and bases disagree on k")
    return np.tensordot(weights.weights, bases.bases, axes=1)


def project_frame(cam: AffineCamera, shape) -> np.ndarray:
    """Image of a ``(3, n)`` point set, ``(2, n)``."""
    return cam.a @ np.asarray(shape, dtype=float) + cam.c[:, None]


def motion_matrix(cams, weights: DeformationWeights) -> np.ndarray:
    """Structured motion ``[w_i1 A_i ... w_ik A_i | c_i]`` stacked, ``(2m, 3k+1)``."""
    cams = list(cams)
    w = weights.weights
    if len(cams) != w.shape[0]:
        raise ValueError(f"{len(cams)} cameras for {w.shape[0]} weight rows")
    k = w.shape[1]
    M = np.empty((2 * len(cams), 3 * k + 1))
    for i, cam in enumerate(cams):
        for l in range(k):
            M[2 * i : 2 * i + 2, 3 * l : 3 * l + 3] = w[i, l] * cam.a
        M[2 * i : 2 * i + 2, -1] = cam.c
    return M


def homogeneous_shape(bases: ShapeBases) -> np.ndarray:
    """Stacked bases with an all-ones last row, ``(3k+1, n)``."""
    return np.vstack([bases.stacked(), np.ones((1, bases.points))])


def build_tracking(cams, bases: ShapeBases, weights: DeformationWeights) -> TrackingMatrix:
    """Noise-free, fully observed tracking matrix of the model."""
    if weights.weights.shape[1] != bases.k:
        raise ValueError("weights and bases disagree on k")
    W = motion_matrix(cams, weights) @ homogeneous_shape(bases)
    return TrackingMatrix(W, np.ones((W.shape[0] // 2, W.shape[1]), dtype=bool))


def polar_rows(B) -> np.ndarray:
    """Nearest ``(2, 3)`` matrix with orthonormal rows (Frobenius sense)."""
    U, _, Vt = np.linalg.svd(B, full_matrices=False)
    return U @ Vt


def rotation_from_rows(P) -> np.ndarray:
    """Complete two orthonormal rows to a proper rotation."""
    return np.vstack([P, np.cross(P[0], P[1])])


def _decompose_frame(blocks, refinements=2):
    norms = np.linalg.norm(blocks, axis=(1, 2))
    if not np.any(norms > 0):
        return None
    P = polar_rows(blocks[int(np.argmax(norms))])
    for _ in range(refinements + 1):
        w = np.einsum("lab,ab->l", blocks, P) / 2.0
        P = polar_rows(np.tensordot(w, blocks, axes=1))
    w = np.einsum("lab,ab->l", blocks, P) / 2.0
    nz = np.flatnonzero(np.abs(w) > 1e-12 * np.abs(w).max())
    if nz.size and w[nz[0]] < 0:
        w, P = -w, -P
    return P, w


def decompose_motion(M, k: int, refinements: int = 2):
    """Split a metric motion matrix into per-frame rotations and weights.

    For each frame the ``k`` sub-blocks are fitted jointly: the shared
    rotation rows come from an orthogonal Procrustes fit to the
    weight-combined blocks, the weights from a least-squares fit of each
    block to those rows, alternated ``refinements`` extra times. The sign of
    each frame is fixed so that its first non-zero weight is non-negative.

    Per-frame scale and weight magnitude are not separable from image data.
    For ``k == 1`` the weight is pinned to 1 and the scale varies per frame
    (rigid model). For ``k >= 2`` one camera scale is shared by the sequence,
    equal to the mean first-basis weight magnitude, and the weights carry the
    per-frame magnitude.

    Args:
        M: motion matrix ``(2m, 3k)`` or ``(2m, 3k+1)``; a trailing
            translation column becomes the motion translation.

    Returns:
        (list of EuclideanMotion, DeformationWeights, residual) where
        ``residual`` is the Frobenius norm of ``M`` minus its recomposition.
    """
    M = np.asarray(M, dtype=float)
    m = M.shape[0] // 2
    if M.shape[1] == 3 * k + 1:
        trans = M[:, -1].reshape(m, 2)
        M = M[:, :-1]
    elif M.shape[1] == 3 * k:
        trans = np.zeros((m, 2))
    else:
        raise ValueError(f"motion matrix has {M.shape[1]} columns, expected {3 * k} or {3 * k + 1}")

    rows = np.empty((m, 2, 3))
    raw = np.empty((m, k))
    for i in range(m):
        blocks = M[2 * i : 2 * i + 2].reshape(2, k, 3).transpose(1, 0, 2)
        out = _decompose_frame(blocks, refinements)
        if out is None:
            raise DegenerateFrameError(f"frame {i} has an all-zero motion block")
        rows[i], raw[i] = out

    if k == 1:
        scales = np.abs(raw[:, 0])
        bad = np.flatnonzero(scales <= 1e-12 * max(scales.max(), 1e-300))
        if bad.size:
            raise DegenerateFrameError(f"frame {int(bad[0])} has zero weight")
        weights = np.ones((m, 1))
    else:
        s = float(np.mean(np.abs(raw[:, 0])))
        if not s > 0:
            s = float(np.sqrt(np.mean(np.sum(raw**2, axis=1))))
        if not s > 0:
            raise DegenerateFrameError("all frames have zero weight")
        scales = np.full(m, s)
        weights = raw / s

    motions = [
        EuclideanMotion(rotation_from_rows(rows[i]), scales[i], trans[i]) for i in range(m)
    ]
    recomposed = np.einsum("il,iab->ialb", weights * scales[:, None], rows).reshape(2 * m, 3 * k)
    residual = float(np.linalg.norm(M - recomposed))
    return motions, DeformationWeights(weights), residual
