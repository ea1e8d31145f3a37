"""Exception types shared across the toolkit.

Invalid *arguments* raise plain ValueError; the classes below cover problems
with data that arrives from files or from upstream pipeline stages.
"""


class FqError(Exception):
    """Base class for toolkit errors."""


class FormatError(FqError):
    """A container or record does not follow the on-disk layout."""


class CorruptionError(FormatError):
    """A container is structurally readable but fails integrity checks."""


class ValidationError(FqError):
    """Decoded data violates a value-level contract (e.g. non-finite weights)."""


class DegenerateInputError(FqError):
    """Input carries too little signal for the requested operation."""


class AccumulatorOverflowError(FqError):
    """A worst-case bound shows the 32-bit accumulator could overflow."""


class TrainingDivergedError(FqError):
    """Loss became non-finite during training."""
