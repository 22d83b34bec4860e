"""Metric upgrade of an affine factorization.

The affine factors are defined only up to an invertible ``H``:
``W = (M H)(H^-1 S)``. This module finds the ``H`` whose upgraded motion
blocks are scaled rotations and extracts per-frame Euclidean shapes.

Procedure, for ``k`` bases:

1. Augmented input (rank ``3k+1``) is first moved into a gauge whose last
   shape row is the homogeneous ones row and whose other rows are centred;
   the remaining problem is the translation-free rank-``3k`` one.
2. One corrective column triple ``G`` (``3k x 3``) is sought such that every
   frame's ``M_i G`` has two orthogonal rows of equal norm. ``Q = G G^T``
   lies in the null space of a linear constraint system; for ``k == 1`` that
   space is one-dimensional and ``G`` follows from an eigen-decomposition,
   for ``k >= 2`` a rank-3 PSD element is found by multi-start nonlinear
   least squares on ``G`` itself. The trust-region solver is used rather
   than MINPACK Levenberg-Marquardt, whose iterates are not bitwise
   reproducible between calls.
3. ``G`` yields every frame's rotation. With rotations known, the weights
   are the null space of a linear system and the full ``H`` follows by least
   squares. Rotations and weights are then refined jointly.

Rotation constraints alone leave a per-frame sign of the weights undecided
when ``k >= 2`` (each frame's shape could be point-reflected), and the
bases are defined only up to an invertible ``k x k`` mixing. The mixing is
fixed so the first basis is the principal shape mode of the sequence; the
per-frame sign then makes each shape correlate positively with it. Frames
whose shape truly anti-correlates with the dominant mode are therefore
returned reflected; the basis constraint that would resolve this is not
implemented. Finally the global rotation and mirror are fixed: frame 0
gets an identity rotation and the first basis a positively skewed depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import least_squares

from .errors import DegenerateMotionError
from .factor import Factorization
from .model import (
    DeformationWeights,
    EuclideanMotion,
    ShapeBases,
    _decompose_frame,
    compose_shapes,
    decompose_motion,
    polar_rows,
    rotation_from_rows,
)


@dataclass(frozen=True)
class UpgradeConfig:
    """Tolerances and search settings for the metric upgrade."""

    # constraint singular value gap below which motion is called degenerate
    degenerate_tol: float = 1e-9
    # smallest/largest singular value of H accepted as invertible
    invertible_tol: float = 1e-12
    n_starts: int = 12
    max_refinements: int = 500
    # stop refining once an iteration shrinks the fit by less than this factor
    refine_stall: float = 0.999
    seed: int = 0


@dataclass(frozen=True, eq=False)
class UpgradeMatrix:
    """Corrective transform and solve diagnostics.

    ``constraint_residual`` is the largest per-frame relative violation of
    the equal-norm/orthogonality constraints after upgrading.
    """

    h: np.ndarray
    condition: float
    constraint_residual: float
    clamped: bool = False
    augmented: bool = False

    def __post_init__(self):
        h = np.array(self.h, dtype=float)
        s = np.linalg.svd(h, compute_uv=False)
        if not np.all(np.isfinite(h)) or s[-1] <= 1e-12 * s[0]:
            raise DegenerateMotionError("upgrade matrix is singular")
        h.flags.writeable = False
        object.__setattr__(self, "h", h)

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.h)


@dataclass(frozen=True, eq=False)
class EuclideanReconstruction:
    """Upgraded structure and motion.

    ``motion_matrix`` and ``shape_matrix`` are ``M H`` and ``H^-1 S``; their
    product equals the affine fit exactly. ``homogeneous_row`` is the last
    shape row for augmented input (``None`` otherwise). ``decomposition_residual``
    is how far the upgraded motion is from exact scaled rotations.
    """

    motions: list
    weights: DeformationWeights
    bases: ShapeBases
    shapes: np.ndarray
    motion_matrix: np.ndarray
    shape_matrix: np.ndarray
    homogeneous_row: np.ndarray | None
    decomposition_residual: float

    def reproject(self) -> np.ndarray:
        """Tracking matrix implied by the metric cameras and shapes."""
        out = np.empty((2 * len(self.motions), self.shapes.shape[2]))
        for i, mo in enumerate(self.motions):
            out[2 * i : 2 * i + 2] = (
                mo.scale * mo.rotation[:2] @ self.shapes[i] + mo.translation[:, None]
            )
        return out


def _sym_index(d):
    iu = np.triu_indices(d)
    return iu


def _bilinear_rows(X, Y, iu):
    # coefficients of vech(Q) in x^T Q y, for row pairs (x, y)
    p, q = iu
    off = (p != q).astype(float)
    return X[:, p] * Y[:, q] + off * X[:, q] * Y[:, p]


def _vech_to_sym(v, d, iu):
    Q = np.zeros((d, d))
    Q[iu] = v
    return Q + np.triu(Q, 1).T


def constraint_system(Mr):
    """Linear equal-norm and orthogonality constraints on ``vech(Q)``.

    Returns the ``(2m, d(d+1)/2)`` matrix whose null space holds every
    symmetric ``Q`` with ``M_i Q M_i^T`` proportional to the identity.
    """
    d = Mr.shape[1]
    iu = _sym_index(d)
    a, b = Mr[0::2], Mr[1::2]
    A = np.empty((Mr.shape[0], len(iu[0])))
    A[0::2] = _bilinear_rows(a, a, iu) - _bilinear_rows(b, b, iu)
    A[1::2] = _bilinear_rows(a, b, iu)
    return A, iu


def metric_residual(M, k: int) -> np.ndarray:
    """Per-frame relative violation of the scaled-orthographic constraints.

    For each frame's stacked ``(2, 3k)`` motion block with rows ``r1, r2``,
    returns ``max(| |r1| - |r2| | / |r1|, |r1 . r2| / |r1|^2)``.
    """
    M = np.asarray(M)[:, : 3 * k]
    r1, r2 = M[0::2], M[1::2]
    n1 = np.linalg.norm(r1, axis=1)
    n2 = np.linalg.norm(r2, axis=1)
    dot = np.abs(np.sum(r1 * r2, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        res = np.maximum(np.abs(n1 - n2) / n1, dot / n1**2)
    return np.where(n1 > 0, res, np.inf)


def _psd_factor(Q):
    lam, V = np.linalg.eigh(Q)
    lam, V = lam[::-1][:3], V[:, ::-1][:, :3]
    clamped = bool(np.any(lam < 0))
    return V * np.sqrt(np.clip(lam, 0, None)), clamped, lam


def _lm_residuals(Mn, m):
    a, b = Mn[0::2], Mn[1::2]
    d = Mn.shape[1]
    sm = np.sqrt(m)

    def fun(g):
        G = g.reshape(d, 3)
        p1, p2 = a @ G, b @ G
        e1 = np.sum(p1 * p1, 1) - np.sum(p2 * p2, 1)
        e2 = 2 * np.sum(p1 * p2, 1)
        en = sm * ((np.sum(p1 * p1) + np.sum(p2 * p2)) / (2 * m) - 1.0)
        return np.concatenate([e1, e2, [en]])

    def jac(g):
        G = g.reshape(d, 3)
        p1, p2 = a @ G, b @ G
        J1 = 2 * (a[:, :, None] * p1[:, None, :] - b[:, :, None] * p2[:, None, :])
        J2 = 2 * (a[:, :, None] * p2[:, None, :] + b[:, :, None] * p1[:, None, :])
        Jn = (sm / m) * (Mn.T @ (Mn @ G))
        return np.vstack([J1.reshape(m, -1), J2.reshape(m, -1), Jn.reshape(1, -1)])

    return fun, jac


def _search_triple(Mn, null_basis, iu, cfg):
    m, d = Mn.shape[0] // 2, Mn.shape[1]
    fun, jac = _lm_residuals(Mn, m)
    rng = np.random.default_rng(cfg.seed)
    best, best_cost = None, np.inf
    for _ in range(cfg.n_starts):
        c = rng.standard_normal(null_basis.shape[0])
        Q = _vech_to_sym(c @ null_basis, d, iu)
        if np.trace(Q) < 0:
            Q = -Q
        G0, _, _ = _psd_factor(Q)
        scale = np.sqrt(np.sum((Mn @ G0) ** 2) / (2 * m))
        if not scale > 0:
            continue
        sol = least_squares(fun, (G0 / scale).ravel(), jac=jac, method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        G = sol.x.reshape(d, 3)
        if np.linalg.matrix_rank(G, tol=1e-8 * np.abs(G).max()) < 3:
            continue
        if sol.cost < best_cost:
            best, best_cost = G, sol.cost
        if best_cost < 1e-26:
            break
    if best is None:
        raise DegenerateMotionError("no rank-3 corrective transform found")
    return best


def _orth_complement_projector(Mn):
    Qm, _ = np.linalg.qr(Mn)
    return np.eye(Mn.shape[0]) - Qm @ Qm.T


def _weights_given_rotations(Pperp, rows, k):
    m = rows.shape[0]
    Pp = Pperp.reshape(2 * m, m, 2)
    N = np.einsum("pia,iac->pci", Pp, rows).reshape(6 * m, m)
    _, _, Vt = np.linalg.svd(N, full_matrices=False)
    return Vt[-k:][::-1].T


def _full_transform(Mn, pinv, Omega, rows):
    m, k = Omega.shape
    H = np.empty((Mn.shape[1], 3 * k))
    for l in range(k):
        Y = (Omega[:, l, None, None] * rows).reshape(2 * m, 3)
        H[:, 3 * l : 3 * l + 3] = pinv @ Y
    return H


def _nonrigid_transform(Mn, G, k, cfg):
    # Alternate: weights and H given rotations, rotations given H. The
    # constraint solve for G only pins rotations to ~sqrt(eps); this loop
    # converges linearly to the exact bilinear fit.
    m = Mn.shape[0] // 2
    rows = np.array([polar_rows(Mn[2 * i : 2 * i + 2] @ G) for i in range(m)])
    Pperp = _orth_complement_projector(Mn)
    pinv = np.linalg.pinv(Mn)
    prev = np.inf
    for _ in range(cfg.max_refinements):
        Omega = _weights_given_rotations(Pperp, rows, k)
        H = _full_transform(Mn, pinv, Omega, rows)
        Mu = (Mn @ H).reshape(m, 2, k, 3)
        fit = np.linalg.norm(Mu - np.einsum("il,iab->ialb", Omega, rows))
        if fit < 1e-14 or fit > cfg.refine_stall * prev:
            break
        prev = fit
        rows = np.array([polar_rows(np.einsum("l,alb->ab", Omega[i], Mu[i])) for i in range(m)])
    return H, Omega


def _basis_gauge(Omega, bases):
    """Mixing ``A`` (k x k) that makes basis 1 the principal shape direction.

    Shapes ``Omega @ bases`` are invariant to ``(Omega A, A^-1 bases)``. The
    chosen ``A`` orthonormalises the bases and orders them by how much of
    the shape sequence they carry, so the first weight of every frame is the
    projection of its shape on the dominant shape mode.
    """
    C = bases @ bases.T
    Lc = np.linalg.cholesky(C)
    _, _, Wt = np.linalg.svd(Omega @ Lc, full_matrices=False)
    A = Lc @ Wt.T
    Op = Omega @ A
    # per-frame signs of Omega are arbitrary: normalise each frame so its
    # first non-zero weight is positive, then orient the later bases so
    # their weights sum positive over the sequence
    tiny = 1e-12 * np.abs(Op).max()
    first = np.argmax(np.abs(Op) > tiny, axis=1)
    rows = np.sign(Op[np.arange(Op.shape[0]), first])
    rows[rows == 0] = 1.0
    sig = np.sign(np.sum(Op * rows[:, None], axis=0))
    sig[0] = 1.0
    sig[sig == 0] = 1.0
    return A * sig


def _rotation_gauge(Mn, H3, Z, k):
    """Orthogonal ``Q`` (3 x 3) fixing the global rotation and mirror.

    ``(M H (I x Q), (I x Q^T) H^-1 S)`` satisfies the same constraints for
    any orthogonal ``Q``. The chosen one makes frame 0's camera an identity
    rotation and the depth of the first basis positively skewed, so the
    output does not depend on where the search happened to converge.
    """
    blocks = (Mn[:2] @ H3).reshape(2, k, 3).transpose(1, 0, 2)
    out = _decompose_frame(blocks)
    if out is None:
        return np.eye(3)
    Q = rotation_from_rows(out[0]).T
    B1 = Q.T @ np.linalg.solve(H3, Z)[:3]
    z = B1[2] - B1[2].mean()
    if np.sum(z**3) < 0:
        Q = Q @ np.diag([1.0, 1.0, -1.0])
    return Q


def _homogeneous_gauge(S_hat, k):
    r = S_hat.shape[0]
    h, *_ = np.linalg.lstsq(S_hat.T, np.ones(S_hat.shape[1]), rcond=None)
    P = null_space(h[None, :]).T
    zbar = (P @ S_hat).mean(axis=1)
    L = np.vstack([P - np.outer(zbar, h), h[None, :]])
    return L


def recover_upgrade(F: Factorization, k: int, cfg: UpgradeConfig = UpgradeConfig()) -> UpgradeMatrix:
    """Find the transform that makes the motion blocks scaled rotations.

    Accepts rank ``3k`` (centroid-registered) or rank ``3k+1`` (augmented)
    factorizations.

    Raises:
        DegenerateMotionError: when the constraints leave more freedom than
            the gauge (e.g. no rotation across the sequence) or the
            recovered transform is singular.
    """
    r = F.rank
    if r == 3 * k + 1:
        L = _homogeneous_gauge(F.shape, k)
        Mp = F.motion @ np.linalg.inv(L)
        augmented = True
    elif r == 3 * k:
        L = np.eye(r)
        Mp = F.motion
        augmented = False
    else:
        raise ValueError(f"factorization rank {r} is neither 3k={3 * k} nor 3k+1={3 * k + 1}")

    Mr = Mp[:, : 3 * k]
    mu = np.sqrt(np.mean(np.sum(Mr**2, axis=1)))
    if not mu > 0:
        raise DegenerateMotionError("motion factor is zero")
    Mn = Mr / mu
    m, d = Mn.shape[0] // 2, 3 * k

    sv = np.linalg.svd(Mn, compute_uv=False)
    if sv[-1] <= cfg.degenerate_tol * sv[0]:
        raise DegenerateMotionError("motion factor is rank deficient")

    A, iu = constraint_system(Mn)
    nullity = 2 * k * k - k
    nvar = A.shape[1]
    if A.shape[0] < nvar - nullity:
        raise DegenerateMotionError(
            f"{m} frames give {A.shape[0]} constraints, need {nvar - nullity}"
        )
    _, s, Vt = np.linalg.svd(A)
    s_full = np.zeros(nvar)
    s_full[: s.size] = s
    if s_full[nvar - nullity - 1] <= cfg.degenerate_tol * s_full[0]:
        raise DegenerateMotionError(
            "metric constraints are rank deficient beyond the gauge; "
            "the cameras do not rotate enough"
        )
    null_basis = Vt[nvar - nullity :]

    # translation-free part of the shape factor in the homogeneous gauge
    Z = (L @ F.shape)[:d]
    clamped = False
    if k == 1:
        Q = _vech_to_sym(null_basis[0], d, iu)
        if np.trace(Q) < 0:
            Q = -Q
        G, clamped, _ = _psd_factor(Q)
        H3 = G
    else:
        G = _search_triple(Mn, null_basis, iu, cfg)
        H3, Omega = _nonrigid_transform(Mn, G, k, cfg)
        B = np.linalg.solve(H3, Z).reshape(k, 3 * Z.shape[1])
        A = _basis_gauge(Omega, B)
        H3 = H3 @ np.kron(A, np.eye(3))
    H3 = H3 @ np.kron(np.eye(k), _rotation_gauge(Mn, H3, Z, k))

    H3 = H3 / mu
    if augmented:
        H = np.linalg.inv(L) @ np.block(
            [[H3, np.zeros((d, 1))], [np.zeros((1, d)), np.ones((1, 1))]]
        )
    else:
        H = H3
    sH = np.linalg.svd(H, compute_uv=False)
    if sH[-1] <= cfg.invertible_tol * sH[0]:
        raise DegenerateMotionError("recovered upgrade matrix is singular")
    resid = metric_residual(F.motion @ H, k)
    return UpgradeMatrix(
        H,
        condition=float(sH[0] / sH[-1]),
        constraint_residual=float(np.max(resid)),
        clamped=clamped,
        augmented=augmented,
    )


def apply_upgrade(F: Factorization, H: UpgradeMatrix, k: int) -> EuclideanReconstruction:
    """Upgrade the factors and split them into cameras, weights and shapes."""
    if H.h.shape != (F.rank, F.rank):
        raise ValueError(f"upgrade is {H.h.shape}, factorization rank {F.rank}")
    M = F.motion @ H.h
    S = np.linalg.solve(H.h, F.shape)
    n = S.shape[1]
    bases = ShapeBases(S[: 3 * k].reshape(k, 3, n))
    motions, weights, resid = decompose_motion(M, k)
    shapes = compose_shapes(bases, weights)
    return EuclideanReconstruction(
        motions=motions,
        weights=weights,
        bases=bases,
        shapes=shapes,
        motion_matrix=M,
        shape_matrix=S,
        homogeneous_row=S[-1].copy() if F.rank == 3 * k + 1 else None,
        decomposition_residual=resid,
    )


def with_translations(recon: EuclideanReconstruction, translations) -> EuclideanReconstruction:
    """Copy of ``recon`` with per-frame image translations replaced."""
    t = np.asarray(translations, dtype=float).reshape(-1, 2)
    motions = [EuclideanMotion(mo.rotation, mo.scale, t[i]) for i, mo in enumerate(recon.motions)]
    return EuclideanReconstruction(
        motions, recon.weights, recon.bases, recon.shapes, recon.motion_matrix,
        recon.shape_matrix, recon.homogeneous_row, recon.decomposition_residual,
    )
