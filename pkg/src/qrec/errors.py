"""Exception hierarchy shared by all qrec modules.

Exit-code mapping used by the CLI: usage errors exit 2 (argparse),
DataError and subclasses exit 3, NumericError exits 4.
"""


class QrecError(Exception):
    """Base class for all qrec errors."""


class DimensionError(QrecError):
    """Shape mismatch between quaternion operands."""

    def __init__(self, what, left, right):
        super().__init__(f"{what}: incompatible shapes {left} vs {right}")
        self.left = left
        self.right = right


class ContractError(QrecError):
    """An operation was invoked outside its contract (e.g. non-scalar loss)."""


class EmptyHistoryError(QrecError):
    """A history/sequence is empty or fully masked where at least one item is required."""


class UnknownParameterError(QrecError, KeyError):
    """A parameter name is not registered."""


class LookupIdError(QrecError):
    """An embedding id is outside the table's row range."""


class SamplingExhaustedError(QrecError):
    """A user has no eligible negative items to sample."""


class DataError(QrecError):
    """Base for dataset ingestion/processing failures (CLI exit code 3)."""


class MalformedRowError(DataError):
    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.line_no = line_no


class EmptyAfterFilterError(DataError):
    """k-core filtering removed every interaction."""


class DatasetTooSmallError(DataError):
    """Too few interactions to split."""


class NumericError(QrecError):
    """Non-finite loss or other numeric failure (CLI exit code 4)."""


class CorrelationUndefinedError(NumericError):
    """Pearson correlation requested on zero-variance inputs."""
