"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: contract/config/dimension errors exit 1,
I/O errors (including :class:`DatasetError`) exit 2.
"""


class UnitmodError(Exception):
    """Base class for all library errors."""


class DimensionError(UnitmodError, ValueError):
    """Tensor shapes are incompatible; the message names the offending axis."""


class ConfigError(UnitmodError, ValueError):
    """A configuration value violates a documented precondition."""


class ContractError(UnitmodError, RuntimeError):
    """An operation was invoked outside its contract (API misuse)."""


class DatasetError(UnitmodError, OSError):
    """A dataset directory or manifest is missing or corrupt."""


class TrainingAbort(UnitmodError, RuntimeError):
    """A training step produced a non-finite loss; the message names the
    offending term and batch index."""
