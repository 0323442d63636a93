"""Exception types raised across the package."""


class UssError(Exception):
    """Base class for all package errors."""


class ZeroNorm(UssError, ValueError):
    pass


class LengthMismatch(UssError, ValueError):
    pass


class InvalidConfig(UssError, ValueError):
    pass


class InsufficientData(UssError, ValueError):
    pass


class IdMismatch(UssError, ValueError):
    pass


class InfeasibleThreshold(UssError):
    """Threshold-dependent bound requested on inputs that violate the threshold condition."""


class ShapeMismatch(UssError, ValueError):
    pass


class StaleCache(UssError, RuntimeError):
    pass


class EmptyScores(UssError, ValueError):
    pass


class InsufficientPairs(UssError, ValueError):
    pass


class VersionMismatch(UssError, ValueError):
    pass
