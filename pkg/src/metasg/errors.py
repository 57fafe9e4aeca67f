"""Exception types shared across the package."""


class MetaSGError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MetaSGError, ValueError):
    pass


class ShapeError(MetaSGError, ValueError):
    pass


class DataError(MetaSGError, ValueError):
    pass


class AggregationError(MetaSGError, ValueError):
    pass


class EpisodeError(MetaSGError, RuntimeError):
    pass


class ProtocolError(MetaSGError, RuntimeError):
    """Raised when callers break a sampling or staging contract."""


class CapabilityError(MetaSGError, RuntimeError):
    """Raised when a request exceeds a configured size cap."""
