"""Exception types shared across the package."""


class PscError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(PscError):
    """Invalid inputs, files, or configuration. CLI exit code 2."""


class ComputeError(PscError):
    """Numerical failure during fitting or evaluation. CLI exit code 3."""
