"""Exception types shared across the package."""


class ReflectGANError(Exception):
    """Base class for package errors."""


class DegenerateInputError(ReflectGANError, ValueError):
    """A formula hit a vanishing denominator or an invalid radicand."""


class ConfigError(ReflectGANError, ValueError):
    """Invalid configuration, shape or file schema."""


class DataError(ReflectGANError, ValueError):
    """Malformed or insufficient input data."""


class TrainingError(ReflectGANError, RuntimeError):
    """Training diverged (non-finite loss)."""


class LeakageError(ReflectGANError, RuntimeError):
    """A held-out sample was used to fit an upstream artifact."""
