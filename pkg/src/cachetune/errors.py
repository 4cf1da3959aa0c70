"""Exception types shared across the package."""


class CacheTuneError(Exception):
    """Base class for all cachetune errors."""


class ShapeError(CacheTuneError):
    """Tensor or record shapes are incompatible."""


class InvalidParam(CacheTuneError):
    """A parameter is outside its documented domain."""


class InvalidPlan(CacheTuneError):
    """An index plan is inconsistent (duplicates, gaps, overlap)."""


class NotFound(CacheTuneError):
    """Requested chunk id is not present in the pool."""


class AlreadyExists(CacheTuneError):
    """Chunk id is already present in the pool."""


class IoError(CacheTuneError):
    """Backing storage failed or produced inconsistent bytes."""


class ObjectiveError(CacheTuneError):
    """The search objective returned a non-finite value."""


class ProfileError(CacheTuneError):
    """Hardware profiling could not produce a usable measurement."""
