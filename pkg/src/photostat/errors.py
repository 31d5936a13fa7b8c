"""Exception hierarchy shared by all photostat modules."""


class PhotostatError(Exception):
    """Base class for every error raised by photostat."""


class DomainError(PhotostatError, ValueError):
    """A parameter lies outside its mathematical domain."""


class TruncationError(DomainError):
    """A photon number does not fit in the truncated Fock space."""


class ShapeError(PhotostatError, ValueError):
    """Vectors or distributions have incompatible lengths."""


class DatasetParseError(PhotostatError, ValueError):
    """A dataset file is malformed.

    Attributes:
        line (int | None): 1-based line number of the offending row, if known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateDataError(PhotostatError, ArithmeticError):
    """The data is impossible under the current iterate (zero model probability)."""


class UndefinedValueError(PhotostatError, ArithmeticError):
    """A quantity is undefined, e.g. a ratio with a vanishing denominator."""


class UndefinedUncertaintyError(UndefinedValueError):
    """No efficiency row contributes to the uncertainty of a Fock index."""


class IllPosedFitError(PhotostatError, ValueError):
    """A chi-square fit cannot be formed (zero uncertainties, no degrees of freedom)."""
