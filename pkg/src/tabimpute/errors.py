"""Exception hierarchy shared by every module.

`DataError` subclasses map to CLI exit code 2, `NumericalError` subclasses to
exit code 3.
"""

from __future__ import annotations


class TabImputeError(Exception):
    """Base class for all library errors."""


class DataError(TabImputeError):
    """Input data or configuration is unusable."""


class NumericalError(TabImputeError):
    """A numerical routine failed."""


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class UnknownLevelError(DataError):
    def __init__(self, label: str, column: str | None = None):
        self.label = label
        self.column = column
        where = f" in column {column!r}" if column else ""
        super().__init__(f"unknown level {label!r}{where}")


class HeaderMismatchError(DataError):
    pass


class DegenerateColumnError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


# gbt / shap use the shorter name
ShapeError = ShapeMismatchError


class InsufficientDataError(DataError):
    pass


class FeatureBudgetError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class DegenerateError(DataError):
    pass


class LengthError(DataError):
    pass


class UnknownColumnError(DataError):
    pass


class RankError(DataError):
    pass


class MaskingError(DataError):
    pass


class ConvergenceError(NumericalError):
    pass
