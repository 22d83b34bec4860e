"""Nonrigid structure from motion by augmented affine factorization with
residual-based outlier rejection."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AlignmentError,
    DegenerateFrameError,
    DegenerateMotionError,
    NRSFMError,
    OverRejectionError,
    PreconditionError,
    SolvabilityError,
    StatisticsError,
    TrackingFormatError,
)
from .estimator import NonrigidFactorization  # noqa: E402
from .evaluation import align_similarity, detection_scores, evaluate, reprojection_variance, shape_error, sweep  # noqa: E402
from .factor import Factorization, SolverConfig, WeightMatrix, alternating_factor, truncated_factor  # noqa: E402
from .robust import Reconstruction, RobustConfig, robust_reconstruct  # noqa: E402
from .synth import SceneConfig, SceneGroundTruth, make_benchmark  # noqa: E402
from .tracking import TrackingMatrix, load_tracking, register_to_centroid, save_tracking, singular_spectrum  # noqa: E402
from .upgrade import UpgradeConfig, apply_upgrade, recover_upgrade  # noqa: E402

__all__ = [
    "AlignmentError",
    "DegenerateFrameError",
    "DegenerateMotionError",
    "Factorization",
    "NRSFMError",
    "NonrigidFactorization",
    "OverRejectionError",
    "PreconditionError",
    "Reconstruction",
    "RobustConfig",
    "SceneConfig",
    "SceneGroundTruth",
    "SolvabilityError",
    "SolverConfig",
    "StatisticsError",
    "TrackingFormatError",
    "TrackingMatrix",
    "UpgradeConfig",
    "WeightMatrix",
    "align_similarity",
    "alternating_factor",
    "apply_upgrade",
    "detection_scores",
    "evaluate",
    "load_tracking",
    "make_benchmark",
    "recover_upgrade",
    "register_to_centroid",
    "reprojection_variance",
    "robust_reconstruct",
    "save_tracking",
    "shape_error",
    "singular_spectrum",
    "sweep",
    "truncated_factor",
]
