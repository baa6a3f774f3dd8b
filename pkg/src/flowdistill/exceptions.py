"""Exception hierarchy shared by all flowdistill modules."""


class FlowDistillError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FlowDistillError, ValueError):
    """Operand shapes are incompatible."""


class BoundsError(FlowDistillError, IndexError):
    """An index falls outside the valid range."""


class ContractError(FlowDistillError, ValueError):
    """A precondition of an operation is violated."""


class NumericalError(FlowDistillError, ArithmeticError):
    """A computation produced non-finite values."""


class IngestionError(FlowDistillError, ValueError):
    """Input CSV / meta data cannot be turned into a FlowSeries."""


class SplitError(FlowDistillError, ValueError):
    """A chronological split is empty or malformed."""


class FormatError(FlowDistillError, ValueError):
    """A binary file has a bad magic, version, header or payload."""
