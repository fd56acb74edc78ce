"""Exception types shared across the package."""


class MolarError(Exception):
    """Base class for all package errors."""


class DimensionError(MolarError, ValueError):
    """Tensor shapes or embedding dimensions do not agree."""


class ConfigError(MolarError, ValueError):
    """An invalid or inconsistent configuration value."""


class FormatError(MolarError, ValueError):
    """A file on disk does not follow its documented format."""


class TrainingError(MolarError, RuntimeError):
    """Training produced non-finite values or otherwise diverged."""


class ZeroNormError(MolarError, ValueError):
    """Cosine similarity requested for a vector with zero norm."""
