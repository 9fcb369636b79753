"""Exception hierarchy.

Every error raised on bad input derives from :class:`ValidationError`, which
the CLI maps to exit code 2.
"""


class BiostateError(Exception):
    """Base class for all package errors."""


class ValidationError(BiostateError, ValueError):
    """Input violates a documented precondition."""


class MalformedCsv(ValidationError):
    pass


class DuplicateSubject(ValidationError):
    pass


class DuplicateColumn(ValidationError):
    pass


class EmptyPanel(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    def __init__(self, row: int, column: str, subject: str | None = None):
        self.row = row
        self.column = column
        self.subject = subject
        where = f"row {row}" + (f" (subject {subject!r})" if subject else "")
        super().__init__(f"non-finite value at {where}, column {column!r}")


class ZeroVariance(ValidationError):
    def __init__(self, columns: list[str]):
        self.columns = list(columns)
        super().__init__("zero variance in column(s): " + ", ".join(self.columns))


class ShapeMismatch(ValidationError):
    pass


class StaleReport(ValidationError):
    pass


class StaleModel(ValidationError):
    pass


class KOutOfRange(ValidationError):
    pass


class ROutOfRange(ValidationError):
    pass


class SingleCluster(ValidationError):
    pass


class TooFewObservations(ValidationError):
    pass


class SpecInvalid(ValidationError):
    pass


class RuleSyntaxError(ValidationError):
    pass


class NumericalFailure(BiostateError):
    """A numerical routine failed to produce a usable result."""
