"""Exception hierarchy shared across the toolkit.

Format errors are split into distinct classes so callers can tell a corrupt
header apart from a short read or a bad dtype without string matching.
"""


class FreqMergeError(Exception):
    """Base class for all toolkit errors."""


class CheckpointFormatError(FreqMergeError):
    """A checkpoint or bundle file violates the on-disk format."""


class MalformedHeaderError(CheckpointFormatError):
    """Header bytes are not a valid tensor table."""


class TruncatedPayloadError(CheckpointFormatError):
    """File ends before the declared header or payload does."""


class DuplicateTensorNameError(CheckpointFormatError):
    """Two tensors in one file share a name."""


class UnsupportedDtypeError(CheckpointFormatError):
    """Tensor dtype other than 32-bit float."""


class ShapeMismatchError(FreqMergeError):
    """Tensor names or shapes disagree between operands."""


class EmptyTaskVectorError(FreqMergeError):
    """Operation requires a task vector with at least one element."""


class ZeroTaskVectorError(FreqMergeError):
    """All-zero task vectors make the requested statistic undefined."""


class RankError(FreqMergeError):
    """Transform requested on a tensor of unsupported rank."""


class SpectralResidueError(FreqMergeError):
    """Inverse transform left an imaginary residue above tolerance."""


class NonConvergenceError(FreqMergeError):
    """Iterative routine exhausted its iteration budget."""


class ChecksumMismatchError(FreqMergeError):
    """Expert bundle does not match the backbone it is applied to."""


class BundleFormatError(CheckpointFormatError):
    """Expert bundle file violates the bundle format."""


class RoutingError(FreqMergeError):
    """Router cannot produce a decision for the given input."""


class TrainingDivergedError(FreqMergeError):
    """Training produced NaN loss or failed to reduce the loss."""
