"""Exception hierarchy shared by every module in the toolkit."""


class DslpError(Exception):
    """Base class for toolkit errors."""


class ShapeError(DslpError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DslpError, ValueError):
    """A documented precondition was violated by the caller."""


class TapeError(DslpError, RuntimeError):
    """Misuse of the autodiff tape (double backward, foreign operands)."""


class NonFiniteError(DslpError, ArithmeticError):
    """An operation produced NaN or Inf from its inputs."""


class ConfigError(DslpError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class LengthError(DslpError, ValueError):
    """A sequence exceeds the configured maximum length."""


class CheckpointError(DslpError, ValueError):
    """A checkpoint file is malformed or does not match the expected model."""


class InfeasibleAlignmentError(DslpError, ValueError):
    """No CTC alignment of the requested length collapses to the target."""


class NumericalAbort(DslpError, RuntimeError):
    """Training stopped because the loss became non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
