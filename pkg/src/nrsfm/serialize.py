"""JSON, XYZ and manifest files.

Every JSON document carries ``format_version``. Floats are written with
``repr`` precision, so values read back are bit-identical. Boolean masks
are run-length encoded over the row-major flattening: ``runs`` alternates
counts of False and True cells, starting with False.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .model import AffineCamera, DeformationWeights, EuclideanMotion, ShapeBases
from .synth import SceneConfig, SceneGroundTruth
from .tracking import TrackingMatrix, atomic_write_text

FORMAT_VERSION = 1


def rle_encode(mask) -> dict:
    mask = np.asarray(mask, dtype=bool)
    flat = mask.ravel()
    runs = []
    current, count = False, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = bool(v), 1
    runs.append(count)
    return {"shape": list(mask.shape), "runs": runs}


def rle_decode(doc) -> np.ndarray:
    shape = tuple(doc["shape"])
    runs = [int(r) for r in doc["runs"]]
    if sum(runs) != int(np.prod(shape)):
        raise ValueError("run lengths do not cover the mask")
    vals = np.zeros(len(runs), dtype=bool)
    vals[1::2] = True
    return np.repeat(vals, runs).reshape(shape)


def dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, doc):
    atomic_write_text(path, dumps(doc))


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def ground_truth_to_dict(gt: SceneGroundTruth) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "frames": gt.frames,
        "points": gt.points,
        "cameras": [{"a": _floats(c.a), "c": _floats(c.c)} for c in gt.cameras],
        "shapes": [_floats(s) for s in gt.shapes],
        "outlier_mask": rle_encode(gt.outlier_mask),
        "config": gt.config.to_dict() if gt.config is not None else None,
    }
    if gt.bases is not None:
        doc["bases"] = [_floats(b) for b in gt.bases.bases]
        doc["weights"] = [_floats(w) for w in gt.weights.weights]
    return doc


def ground_truth_from_dict(doc) -> SceneGroundTruth:
    """Rebuild ground truth. Clean tracks are re-projected from the stored
    shapes and cameras, so they match the originals to round-off."""
    m, n = int(doc["frames"]), int(doc["points"])
    cams = [
        AffineCamera(np.reshape(c["a"], (2, 3)), np.asarray(c["c"], dtype=float))
        for c in doc["cameras"]
    ]
    shapes = np.asarray(doc["shapes"], dtype=float).reshape(m, 3, n)
    if len(cams) != m:
        raise ValueError(f"{len(cams)} cameras for {m} frames")
    vals = np.empty((2 * m, n))
    for i, cam in enumerate(cams):
        vals[2 * i : 2 * i + 2] = cam.a @ shapes[i] + cam.c[:, None]
    bases = weights = None
    if "bases" in doc:
        bases = ShapeBases(np.asarray(doc["bases"], dtype=float).reshape(-1, 3, n))
        weights = DeformationWeights(np.asarray(doc["weights"], dtype=float).reshape(m, -1))
    cfg = doc.get("config")
    return SceneGroundTruth(
        shapes=shapes,
        cameras=cams,
        clean_tracking=TrackingMatrix(vals, np.ones((m, n), dtype=bool)),
        outlier_mask=rle_decode(doc["outlier_mask"]),
        bases=bases,
        weights=weights,
        config=SceneConfig(**cfg) if cfg else None,
    )


def reconstruction_to_dict(recon, k: int) -> dict:
    """Cameras, weights, bases and shapes of a :class:`Reconstruction`."""
    F = recon.factor
    doc = {
        "format_version": FORMAT_VERSION,
        "bases_count": k,
        "augmented": bool(recon.augmented),
        "frames": F.motion.shape[0] // 2,
        "points": F.shape.shape[1],
        "inlier_mask": rle_encode(recon.inlier_mask),
        "iterations": int(recon.iterations),
    }
    eu = recon.euclidean
    if eu is not None:
        doc["cameras"] = [
            {"rotation": _floats(mo.rotation), "scale": float(mo.scale), "translation": _floats(mo.translation)}
            for mo in eu.motions
        ]
        doc["weights"] = [_floats(w) for w in eu.weights.weights]
        doc["bases"] = [_floats(b) for b in eu.bases.bases]
        doc["shapes"] = [_floats(s) for s in eu.shapes]
    return doc


def cameras_from_dict(doc):
    return [
        EuclideanMotion(np.reshape(c["rotation"], (3, 3)), c["scale"], np.asarray(c["translation"]))
        for c in doc.get("cameras", [])
    ]


def format_xyz(points) -> str:
    """One ``x y z`` line per column of a ``(3, n)`` array."""
    return "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in np.asarray(points, dtype=float).T.tolist())


def audit_to_dict(audit) -> dict:
    return {"format_version": FORMAT_VERSION, "rounds": list(audit)}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, config, seeds, version, inputs=(), outputs=()):
    """Run manifest with sha256 digests. Output names are stored relative
    to the manifest's directory; no timestamps, so reruns are identical."""
    base = os.path.dirname(os.path.abspath(path))
    doc = {
        "format_version": FORMAT_VERSION,
        "command": list(command),
        "config": config,
        "seeds": list(seeds),
        "version": version,
        "inputs": {os.fspath(p): sha256_file(p) for p in inputs},
        "outputs": {os.path.relpath(os.path.abspath(p), base): sha256_file(p) for p in outputs},
    }
    write_json(path, doc)
    return doc
