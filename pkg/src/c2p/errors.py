"""Exception hierarchy shared across the pipeline.

Every domain failure raises a subclass of :class:`C2PError` so the CLI can
map any expected error onto a nonzero exit code without pattern matching.
"""


class C2PError(Exception):
    """Base class for all pipeline errors."""


class NotFoundError(C2PError):
    """A required path (dataset root, manifest, checkpoint) does not exist."""


class EmptyDatasetError(C2PError):
    """A scan matched zero decodable images."""


class InvalidImageError(C2PError):
    """An image is unusable (zero area, wrong band count)."""


class InvalidInputError(C2PError):
    """An argument violates an operation's preconditions (shape, length)."""


class AlreadyMergedError(C2PError):
    """Adapter merge requested on an encoder that carries no adapters."""


class UndefinedMetricError(C2PError):
    """A metric is undefined for the given inputs (e.g. AP with no positives)."""


class DecodeError(C2PError):
    """A caption decoder failed on a feature vector."""


class VersionError(C2PError):
    """A checkpoint was written by an incompatible tool version."""


class TrainingDivergedError(C2PError):
    """Training hit a non-finite loss and aborted."""
