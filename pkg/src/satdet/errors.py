"""Exception types shared across the package."""


class SatdetError(Exception):
    """Base class for errors raised by satdet."""


class ConfigError(SatdetError):
    """Invalid configuration (bad ranges, impossible geometry, wrong flags)."""


class DataError(SatdetError):
    """Invalid data on disk or in memory (manifests, checkpoints, frames)."""


class ShapeError(SatdetError):
    """Tensor shape mismatch in the numeric core."""
