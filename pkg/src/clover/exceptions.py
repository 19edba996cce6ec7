"""Exception hierarchy for the clover package."""


class CloverError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CloverError, ValueError):
    """Operands have inconsistent or unsupported shapes."""


class MaskError(CloverError, ValueError):
    """Invalid mask, or a query row is left with no allowed key position."""


class ConvergenceError(CloverError, RuntimeError):
    """An iterative decomposition did not converge within its sweep budget."""


class TrainingDivergedError(CloverError, RuntimeError):
    """Training aborted because the loss became non-finite."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"loss became non-finite at step {step}")


class ArchiveError(CloverError):
    """Base class for tensor-archive I/O failures."""


class ArchiveFormatError(ArchiveError, ValueError):
    """Malformed header, bad entry fields, or reserved/duplicate names."""


class ArchiveVersionError(ArchiveError, ValueError):
    """The archive declares an unsupported format version."""


class ArchiveTruncatedError(ArchiveError, ValueError):
    """A declared payload region extends past the end of the file."""


class ArchiveOverlapError(ArchiveError, ValueError):
    """Two payload regions overlap."""


class ArchiveNonFiniteError(ArchiveError, ValueError):
    """A stored tensor contains NaN or Inf."""
