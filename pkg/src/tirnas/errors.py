"""Exception hierarchy shared across the package."""


class TirnasError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(TirnasError):
    """Tensor dimensions are inconsistent with the requested operation."""


class ConfigError(TirnasError):
    """An option value or combination of options is invalid."""


class ContractError(TirnasError):
    """A caller violated an API precondition (e.g. non-scalar loss)."""


class NumericError(TirnasError):
    """A forward value became NaN/Inf where finiteness is required."""


class GenotypeError(TirnasError):
    """A discrete architecture description violates its invariants."""


class SearchAborted(TirnasError):
    """The search loop hit a non-recoverable state (e.g. NaN loss)."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
