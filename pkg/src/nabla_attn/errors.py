"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class NablaError(Exception):
    """Base class for all package errors."""


class FormatError(NablaError):
    """A file does not follow the expected binary layout."""


class ValidationError(NablaError):
    """A value violates a data invariant (e.g. a non-finite element)."""


class GeometryError(NablaError):
    """Shapes, grids or block sizes do not fit together."""


class ParamError(NablaError):
    """An algorithm parameter is out of its admissible range."""


class IoError(NablaError, OSError):
    """A file could not be read or written."""


class DivergenceError(NablaError):
    """Training produced a non-finite loss."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
