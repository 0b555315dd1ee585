"""Frequency-domain model merging with lightweight routed task experts."""

from .errors import (
    BundleFormatError,
    CheckpointFormatError,
    ChecksumMismatchError,
    DuplicateTensorNameError,
    EmptyTaskVectorError,
    FreqMergeError,
    MalformedHeaderError,
    NonConvergenceError,
    RankError,
    RoutingError,
    ShapeMismatchError,
    SpectralResidueError,
    TrainingDivergedError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    ZeroTaskVectorError,
)
from .params import (
    Checkpoint,
    TaskVector,
    TensorMeta,
    apply_delta,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    fnv1a64,
    load_checkpoint,
    mean_abs,
    save_checkpoint,
    task_vector,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "TaskVector",
    "TensorMeta",
    "apply_delta",
    "checkpoint_from_bytes",
    "checkpoint_to_bytes",
    "fnv1a64",
    "load_checkpoint",
    "mean_abs",
    "save_checkpoint",
    "task_vector",
    "FreqMergeError",
    "CheckpointFormatError",
    "MalformedHeaderError",
    "TruncatedPayloadError",
    "DuplicateTensorNameError",
    "UnsupportedDtypeError",
    "ShapeMismatchError",
    "EmptyTaskVectorError",
    "ZeroTaskVectorError",
    "RankError",
    "SpectralResidueError",
    "NonConvergenceError",
    "ChecksumMismatchError",
    "BundleFormatError",
    "RoutingError",
    "TrainingDivergedError",
]
