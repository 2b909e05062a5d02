"""Exception types shared across the package."""


class VlgraphError(Exception):
    """Base class for all package errors."""


class ShapeError(VlgraphError):
    """Operands have incompatible shapes."""


class ContractError(VlgraphError):
    """An operation was called outside its contract."""


class DegenerateInputError(VlgraphError):
    """Input is numerically degenerate (e.g. zero-norm vector)."""


class EmptyInputError(VlgraphError):
    """A nonempty collection was required."""


class ValidationError(VlgraphError):
    """Data failed validation against the dataset or file format."""


class NumericalError(VlgraphError):
    """A numerical procedure produced non-finite values or failed to converge."""


class FormatError(VlgraphError):
    """A file does not match the expected binary/JSON format."""
