"""Exception types shared across the package."""


class MMImputeError(Exception):
    """Base class for every error raised deliberately by this package."""


class ShapeError(MMImputeError, ValueError):
    pass


class DomainError(MMImputeError, ValueError):
    pass


class StateError(MMImputeError, RuntimeError):
    pass


class PoisonedGradientError(MMImputeError, FloatingPointError):
    """A non-finite gradient or loss reached the optimizer."""


class FormatError(MMImputeError, ValueError):
    """Malformed binary container, wire frame or cache file."""


class TruncatedFrameError(FormatError):
    pass


class NoEvidenceError(MMImputeError, ValueError):
    """Modal selection was asked to choose with no surviving elements."""


class ConfigurationError(MMImputeError, ValueError):
    pass
