"""Exception hierarchy shared across the package."""


class PurifyError(Exception):
    """Base class for all package errors."""


class ConfigError(PurifyError, ValueError):
    """Invalid or inconsistent configuration."""


class ShapeMismatchError(PurifyError, ValueError):
    """An array does not have the shape a component expects."""


class AdapterError(PurifyError, RuntimeError):
    """An external model (pretrained checkpoint, optional package) is unavailable or failed."""


class ContractError(PurifyError, ValueError):
    """A conditioning or denoiser contract was violated."""


class DivergenceError(PurifyError, RuntimeError):
    """Training produced a non-finite loss.

    Attributes:
        snapshot: the last finite model state, when one exists.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class AttackError(PurifyError, RuntimeError):
    """An attack could not complete (e.g. non-finite gradient)."""


class ReportError(PurifyError, ValueError):
    """An evaluation report violates its invariants."""
