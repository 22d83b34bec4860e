"""Synthetic deformable-cube benchmark.

Scene layout (cube of side ``side_length`` centred at the origin):

* rigid points spread evenly by arc length over the cube's 12 edges;
* ``dynamic_sets[0]`` patches of ``dynamic_sets[1]`` points on mutually
  adjacent faces (+x, +y, +z), each moving outward along its face normal,
  displacement linear in the frame index up to ``amplitude * side_length``.

The point budget is ``12 * side_points`` in total, of which the dynamic sets
take their share; the defaults give 153 rigid + 99 dynamic = 252 points.

The scene is exactly a two-basis model: a rest shape with weight 1 and a
displacement field with weight ``i / (m - 1)``.

Cameras are scaled orthographic with a random rotation per frame and one
zoom for the whole sequence, chosen so every frame fits inside the image
with a margin, and translated so the shape centroid images to the image
centre.

All randomness comes from numpy's PCG64 generator seeded through
``SeedSequence(seed)``: child 0 drives the scene, child 1 the noise, child 2
the outlier placement.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .model import (
    AffineCamera,
    DeformationWeights,
    ShapeBases,
    build_tracking,
    compose_shapes,
)
from .tracking import TrackingMatrix

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

# cube edges as (start corner, direction) in units of the half side
_CORNERS = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
_EDGES = [
    (a, b)
    for a in range(8)
    for b in range(a + 1, 8)
    if np.sum(np.abs(_CORNERS[a] - _CORNERS[b])) == 2
]


@dataclass(frozen=True)
class SceneConfig:
    frames: int = 100
    side_points: int = 21
    dynamic_sets: tuple = (3, 33)
    image_size: int = 800
    noise_sigma: float = 0.0
    outlier_ratio: float = 0.0
    seed: int = 0
    amplitude: float = 0.5
    side_length: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "dynamic_sets", tuple(int(v) for v in self.dynamic_sets))
        if self.frames < 1:
            raise ValueError("frames must be positive")
        if self.side_points < 1:
            raise ValueError("side_points must be positive")
        if len(self.dynamic_sets) != 2 or not 0 <= self.dynamic_sets[0] <= 3:
            raise ValueError("dynamic_sets must be (sets, size) with at most 3 sets")
        if self.dynamic_sets[1] < 0:
            raise ValueError("dynamic set size must be non-negative")
        if self.rigid_points < 1:
            raise ValueError("dynamic points exhaust the point budget")
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.outlier_ratio < 1:
            raise ValueError("outlier_ratio must be in [0, 1)")
        if self.amplitude < 0 or self.side_length <= 0:
            raise ValueError("amplitude must be >= 0 and side_length > 0")

    @property
    def dynamic_points(self) -> int:
        return self.dynamic_sets[0] * self.dynamic_sets[1]

    @property
    def rigid_points(self) -> int:
        return 12 * self.side_points - self.dynamic_points

    @property
    def points(self) -> int:
        return 12 * self.side_points

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dynamic_sets"] = list(self.dynamic_sets)
        return d


@dataclass(frozen=True, eq=False)
class SceneGroundTruth:
    """Per-frame shapes ``(m, 3, n)``, cameras, clean tracks, outlier cells."""

    shapes: np.ndarray
    cameras: list
    clean_tracking: TrackingMatrix
    outlier_mask: np.ndarray
    bases: ShapeBases | None = None
    weights: DeformationWeights | None = None
    config: SceneConfig | None = None

    @property
    def frames(self) -> int:
        return self.shapes.shape[0]

    @property
    def points(self) -> int:
        return self.shapes.shape[2]


def _streams(seed):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def _edge_points(count, half):
    u = (np.arange(count) + 0.5) * len(_EDGES) / count
    e = np.floor(u).astype(int)
    t = (u - e)[:, None]
    a = _CORNERS[[_EDGES[j][0] for j in e]]
    b = _CORNERS[[_EDGES[j][1] for j in e]]
    return (half * ((1 - t) * a + t * b)).T


def _patch(count, half, axis):
    # sunflower layout inside the central part of the +axis face
    j = np.arange(count) + 0.5
    rad = 0.7 * half * np.sqrt(j / count)
    th = j * _GOLDEN_ANGLE
    pts = np.zeros((3, count))
    others = [a for a in range(3) if a != axis]
    pts[others[0]] = rad * np.cos(th)
    pts[others[1]] = rad * np.sin(th)
    pts[axis] = half
    normal = np.zeros((3, count))
    normal[axis] = 1.0
    return pts, normal


def scene_bases(cfg: SceneConfig) -> ShapeBases:
    """Rest shape and displacement field of the cube, ``(2, 3, n)``."""
    half = cfg.side_length / 2
    rest = [_edge_points(cfg.rigid_points, half)]
    disp = [np.zeros((3, cfg.rigid_points))]
    sets, size = cfg.dynamic_sets
    for axis in range(sets):
        p, nrm = _patch(size, half, axis)
        rest.append(p)
        disp.append(nrm * cfg.amplitude * cfg.side_length)
    return ShapeBases(np.stack([np.hstack(rest), np.hstack(disp)]))


def generate_scene(cfg: SceneConfig) -> SceneGroundTruth:
    """Clean ground truth for ``cfg`` (no noise, no outliers)."""
    rng = _streams(cfg.seed)[0]
    bases = scene_bases(cfg)
    m = cfg.frames
    t = np.arange(m) / (m - 1) if m > 1 else np.zeros(1)
    weights = DeformationWeights(np.column_stack([np.ones(m), t]))
    shapes = compose_shapes(bases, weights)

    rots = Rotation.random(m, random_state=rng).as_matrix()
    centroids = shapes.mean(axis=2)
    radius = np.max(np.linalg.norm(shapes - centroids[:, :, None], axis=1))
    zoom = 0.4 * cfg.image_size / radius
    centre = np.full(2, cfg.image_size / 2)
    cams = [
        AffineCamera(zoom * rots[i][:2], centre - zoom * rots[i][:2] @ centroids[i])
        for i in range(m)
    ]
    clean = build_tracking(cams, bases, weights)
    return SceneGroundTruth(
        shapes=shapes,
        cameras=cams,
        clean_tracking=clean,
        outlier_mask=np.zeros((m, cfg.points), dtype=bool),
        bases=bases,
        weights=weights,
        config=cfg,
    )


def corrupt(gt: SceneGroundTruth, cfg: SceneConfig):
    """Add Gaussian noise to every coordinate, then replace a uniformly
    chosen ``outlier_ratio`` of cells with uniform draws over the image.

    Returns:
        (TrackingMatrix, SceneGroundTruth) - the corrupted observations and a
        copy of ``gt`` carrying the outlier mask.
    """
    _, noise_rng, out_rng = _streams(cfg.seed)
    clean = gt.clean_tracking.values
    m, n = gt.frames, gt.points
    W = clean + noise_rng.normal(0.0, cfg.noise_sigma, size=clean.shape)

    n_out = int(round(cfg.outlier_ratio * m * n))
    cells = out_rng.choice(m * n, size=n_out, replace=False)
    mask = np.zeros(m * n, dtype=bool)
    mask[cells] = True
    mask = mask.reshape(m, n)
    fi, pj = np.divmod(np.sort(cells), n)
    draws = out_rng.uniform(0.0, cfg.image_size, size=(n_out, 2))
    W[2 * fi, pj] = draws[:, 0]
    W[2 * fi + 1, pj] = draws[:, 1]

    return TrackingMatrix(W, np.ones((m, n), dtype=bool)), replace(gt, outlier_mask=mask)


def make_benchmark(cfg: SceneConfig):
    """Scene plus corrupted observations in one call."""
    gt = generate_scene(cfg)
    return corrupt(gt, cfg)
