"""Exception types raised across the package."""


class KindMismatchError(ValueError):
    """A DDPM-only operation received an FM schedule, or vice versa."""


class ShapeMismatchError(ValueError):
    pass


class DegenerateTimestepError(ValueError):
    """The one-step inversion would divide by a vanishing signal weight."""


class NumericalFailureError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    """Bad command-line usage; maps to exit code 1."""
