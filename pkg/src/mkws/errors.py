"""Exception hierarchy shared by all modules.

Each class carries the process exit code the CLI maps it to.
"""


class MkwsError(Exception):
    exit_code = 1


class ConfigError(MkwsError, ValueError):
    """Invalid parameters, presets, or mismatched configuration."""

    exit_code = 2


class GeometryError(ConfigError):
    """A source or array layout that violates the geometry contract."""


class ShapeError(ConfigError):
    """Tensor or frame dimensions that do not match a layer."""


class DataError(MkwsError):
    """Missing, empty, or inconsistent data."""

    exit_code = 3


class TrainingDiverged(DataError):
    pass


class ConstraintViolation(MkwsError):
    """A calibration target that cannot be met on the available grid."""

    exit_code = 4
