"""Exception types shared across the package."""


class DualCoreError(Exception):
    """Base class for all package errors."""


class ShapeError(DualCoreError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ConfigError(DualCoreError, ValueError):
    """Invalid configuration value or combination."""


class ContractError(DualCoreError, ValueError):
    """A precondition of an operation was violated."""


class MetricError(DualCoreError, ValueError):
    """A metric is undefined for the given input."""


class TrainingError(DualCoreError, RuntimeError):
    """Non-finite values or other failures during optimization."""


class FormatError(DualCoreError, OSError):
    """Corrupt or unrecognized binary/text file."""


class SplitAccessError(DualCoreError, RuntimeError):
    """The held-out split was touched while it is locked."""
