"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: usage problems are handled by the
argument layer, ``DataError`` and friends exit 2, ``NumericalError``
and friends exit 3.
"""


class OiqaError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(OiqaError):
    """Tensor or layer shapes do not compose."""


class ConfigurationError(OiqaError):
    """A layer / block / run configuration is invalid."""


class DataError(OiqaError):
    """Bad or missing input data (empty datasets, grid mismatches, ...)."""


class SizeError(DataError):
    """A hard size cap (e.g. the materialized-operator limit) was exceeded."""


class FormatError(DataError):
    """A file does not conform to its declared format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(FormatError):
    """Checkpoint is corrupt, truncated, or from an unknown version."""


class CorrelationError(DataError):
    """Correlation is undefined (degenerate variance, too few points)."""


class NumericalError(OiqaError):
    """A numerical procedure failed (divergence, singularity, ...)."""


class InversionError(NumericalError):
    """Matrix inversion refused: singular or ill-conditioned input."""

    def __init__(self, message, condition=None):
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)
        self.condition = condition


class SymmetryError(NumericalError):
    """Conjugate symmetry violated: inverse DFT is not real."""


class TrainingError(NumericalError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch


class ConstructionError(NumericalError):
    """A random operator with the requested spectrum cannot be built."""


class PruningError(ConfigurationError):
    """Pruning request would destroy a layer."""
