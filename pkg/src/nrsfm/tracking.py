"""Feature-tracking matrix: data model, TRK I/O, centroid registration and
rank diagnostics."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFrameError, PreconditionError, TrackingFormatError

TRK_MAGIC = "NRSFM-TRK 1"


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TrackingMatrix:
    """Stacked image observations of ``points`` features over ``frames`` frames.

    ``values`` is ``(2m, n)``: rows ``2i`` and ``2i+1`` hold the u and v
    coordinates of frame ``i``. ``mask`` is ``(m, n)`` and is True where the
    observation is present and trusted. Masked-out cells may hold anything
    (NaN by convention) and never enter a computation.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        mask = _frozen(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape[0] % 2:
            raise ValueError(f"values must be (2m, n), got shape {values.shape}")
        m, n = values.shape[0] // 2, values.shape[1]
        if mask.shape != (m, n):
            raise ValueError(f"mask must be ({m}, {n}), got {mask.shape}")
        if m < 1 or n < 1:
            raise ValueError(f"need at least one frame and one point, got {m}x{n}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_array(cls, values, mask=None):
        """Build from a ``(2m, n)`` array; NaN in either coordinate marks a
        missing point unless an explicit mask is given."""
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[0] % 2:
            raise ValueError(f"values must be (2m, n), got shape {values.shape}")
        finite = np.isfinite(values)
        observed = finite[0::2] & finite[1::2]
        if mask is None:
            mask = observed
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != observed.shape:
                raise ValueError(f"mask must be {observed.shape}, got {mask.shape}")
            if np.any(mask & ~observed):
                raise ValueError("mask marks non-finite cells as observed")
        return cls(values, mask)

    @property
    def frames(self) -> int:
        return self.values.shape[0] // 2

    @property
    def points(self) -> int:
        return self.values.shape[1]

    @property
    def row_mask(self) -> np.ndarray:
        """Mask expanded to the ``(2m, n)`` layout of ``values``."""
        return np.repeat(self.mask, 2, axis=0)

    @property
    def fully_observed(self) -> bool:
        return bool(self.mask.all())

    def filled(self, fill=np.nan) -> np.ndarray:
        """Copy of ``values`` with masked-out cells replaced by ``fill``."""
        out = np.array(self.values)
        out[~self.row_mask] = fill
        return out

    def with_mask(self, mask) -> "TrackingMatrix":
        return TrackingMatrix(self.values, mask)

    def frame(self, i) -> np.ndarray:
        """The ``(2, n)`` block of frame ``i``."""
        return self.values[2 * i : 2 * i + 2]


@dataclass(frozen=True, eq=False)
class CentroidSet:
    """Per-frame image centroids, shape ``(m, 2)``."""

    centroids: np.ndarray

    def __post_init__(self):
        c = _frozen(self.centroids)
        if c.ndim != 2 or c.shape[1] != 2:
            raise ValueError(f"centroids must be (m, 2), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids must be finite")
        object.__setattr__(self, "centroids", c)

    def as_column(self) -> np.ndarray:
        """Centroids stacked as a ``(2m,)`` vector matching tracking rows."""
        return self.centroids.reshape(-1)


def load_tracking(path) -> TrackingMatrix:
    """Read a TRK file.

    Raises:
        TrackingFormatError: on a bad header, wrong row or column counts, or
            non-numeric tokens. The message names the line.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != TRK_MAGIC:
        raise TrackingFormatError(f"expected header {TRK_MAGIC!r}", line=1)
    if len(lines) < 2:
        raise TrackingFormatError("missing dimension line", line=2)
    dims = {}
    for tok in lines[1].split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise TrackingFormatError(f"bad dimension token {tok!r}", line=2)
        try:
            dims[key] = int(val)
        except ValueError:
            raise TrackingFormatError(f"non-integer dimension {tok!r}", line=2) from None
    if set(dims) != {"frames", "points"}:
        raise TrackingFormatError("dimension line must be 'frames=<m> points=<n>'", line=2)
    m, n = dims["frames"], dims["points"]
    if m < 1 or n < 1:
        raise TrackingFormatError("frames and points must be positive", line=2)

    body = [(k + 3, ln) for k, ln in enumerate(lines[2:]) if ln.strip()]
    if len(body) != 2 * m:
        raise TrackingFormatError(f"expected {2 * m} rows, found {len(body)}")
    values = np.empty((2 * m, n))
    for r, (lineno, ln) in enumerate(body):
        toks = ln.split()
        if len(toks) != n:
            raise TrackingFormatError(f"expected {n} values, found {len(toks)}", line=lineno)
        try:
            values[r] = [float(t) for t in toks]
        except ValueError as exc:
            raise TrackingFormatError(f"non-numeric token ({exc})", line=lineno) from None
    try:
        return TrackingMatrix.from_array(values)
    except ValueError as exc:
        raise TrackingFormatError(str(exc)) from None


def format_tracking(W: TrackingMatrix) -> str:
    """Serialise to TRK text. Masked-out cells are written as NaN."""
    vals = W.filled(np.nan)
    out = [TRK_MAGIC, f"frames={W.frames} points={W.points}"]
    for row in vals:
        out.append(" ".join("NaN" if np.isnan(v) else repr(float(v)) for v in row))
    return "\n".join(out) + "\n"


def atomic_write_text(path, text):
    """Write through a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tracking(W: TrackingMatrix, path):
    atomic_write_text(path, format_tracking(W))


def register_to_centroid(W: TrackingMatrix):
    """Subtract each frame's centroid from its observed cells.

    The centroid of a frame is the mean of its observed points only; with
    missing or corrupted data this is the unreliable estimate that the
    augmented formulation is designed to avoid.

    Returns:
        (TrackingMatrix, CentroidSet)
    """
    counts = W.mask.sum(axis=1)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DegenerateFrameError(f"frame {int(empty[0])} has no observations")
    rmask = W.row_mask
    sums = np.where(rmask, W.values, 0.0).sum(axis=1)
    centroids = (sums / np.repeat(counts, 2)).reshape(-1, 2)
    vals = np.where(rmask, W.values - centroids.reshape(-1, 1), W.values)
    return TrackingMatrix(vals, W.mask), CentroidSet(centroids)


def singular_spectrum(W: TrackingMatrix) -> np.ndarray:
    """Singular values of a fully observed tracking matrix, descending."""
    if not W.fully_observed:
        raise PreconditionError(
            "singular spectrum needs a fully observed matrix; "
            "use alternating_factor for missing data"
        )
    return np.linalg.svd(W.values, compute_uv=False)


def truncation_error(spectrum, r: int) -> float:
    """Squared Frobenius error of the best rank-``r`` approximation."""
    s = np.asarray(spectrum, dtype=float)
    if not 1 <= r < s.size:
        raise ValueError(f"rank must satisfy 1 <= r < {s.size}, got {r}")
    return float(np.sum(s[r:] ** 2))
