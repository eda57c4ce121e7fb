"""Exception types shared across modules."""


class EmptyForegroundError(ValueError):
    """Raised when dataset statistics are requested but no foreground voxel exists."""


class DegenerateStatsError(ValueError):
    """Raised when normalization is attempted with a zero foreground spread."""


class MissingReferenceError(ValueError):
    """Raised when an operation needs a reference value that was never set.

    Covers the attack-success check without a clean-performance reference and
    small-component fusion without per-class average object sizes.
    """


class CoverageError(ValueError):
    """Raised when a computation's inputs leave part of the domain unserved.

    Covers voxels missed by patch fusion and (attack, epsilon) cells missing
    from a sweep table handed to the report builder.
    """


class ConfigError(ValueError):
    """Raised when an experiment configuration fails to parse or validate."""
