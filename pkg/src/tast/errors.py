"""Exception types raised across the package."""


class TastError(Exception):
    """Base class for all engine errors."""


class ZeroNormVector(TastError):
    """A vector that must have positive norm is (numerically) zero."""


class ShapeMismatch(TastError):
    """Tensor shapes disagree where they must match."""


class DimensionMismatch(TastError):
    """Vector/feature dimensions disagree."""


class IndexOutOfRange(TastError, IndexError):
    """Ensemble member index outside [0, N_e)."""


class EmptySupportSet(TastError):
    """Operation requires at least one support entry."""


class EmptyNeighborList(TastError):
    """Operation requires at least one retrieved neighbor."""


class NoPrototypes(TastError):
    """Every class is empty; no prototype can be formed."""


class EmptyBatch(TastError):
    """Adaptation step received an empty batch."""


class BatchTooSmall(TastError):
    """Batch statistics need at least two rows."""


class EmptyGrid(TastError):
    """Grid search received no configurations."""


class FeatureFileError(TastError):
    """Malformed feature file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagic(FeatureFileError):
    """Magic bytes or version do not identify a supported feature file."""


class TruncatedFile(FeatureFileError):
    """File ends before the header-declared payload does."""


class NonFiniteValue(FeatureFileError):
    """A feature value is NaN or infinite."""
