"""Exception types shared across the package.

The CLI maps these onto exit-code categories; library code raises them
directly so callers can distinguish caller bugs from bad data or bad files.
"""


class SwitchformerError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(SwitchformerError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(SwitchformerError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateInputError(SwitchformerError, ValueError):
    """Input is structurally empty (e.g. a fully padded modality)."""


class NumericError(SwitchformerError, ArithmeticError):
    """A computation produced NaN/inf where finite values are required."""


class OracleError(SwitchformerError, RuntimeError):
    """A verification oracle detected an inconsistency (e.g. a
    non-deterministic objective handed to the finite-difference checker)."""


class ConfigError(SwitchformerError, ValueError):
    """A configuration value is out of range or internally inconsistent."""


class CheckpointFormatError(SwitchformerError, ValueError):
    """Checkpoint file has a bad magic number or unsupported version."""


class CheckpointCorruptionError(SwitchformerError, ValueError):
    """Checkpoint file is truncated or fails internal consistency checks."""


class CheckpointLoadError(SwitchformerError, ValueError):
    """Checkpoint contents are incompatible with the requested model."""
