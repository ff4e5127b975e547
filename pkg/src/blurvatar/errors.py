"""Exception types shared across the package."""


class BlurvatarError(Exception):
    """Base class for all package errors."""


class ParameterError(BlurvatarError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(BlurvatarError, ValueError):
    """A run configuration is malformed (unknown key, bad value, bad JSON)."""


class StructuralError(BlurvatarError, ValueError):
    """A skeleton or dataset structure is internally inconsistent."""


class GradientError(BlurvatarError, RuntimeError):
    """A gradient came back NaN/Inf; carries the offending parameter group."""

    def __init__(self, group: str, message: str = ""):
        self.group = group
        super().__init__(message or f"non-finite gradient in parameter group '{group}'")


class DataError(BlurvatarError, IOError):
    """Dataset files are missing or unreadable."""
