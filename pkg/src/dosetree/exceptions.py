"""Custom exceptions for dosetree."""

from typing import Optional, Sequence


class DoseTreeError(Exception):
    """Base exception for dosetree errors."""

    pass


class ConfigurationError(DoseTreeError):
    """Raised when configuration is invalid."""

    pass


class DatasetError(DoseTreeError):
    """Raised when an input table cannot be turned into a valid dataset."""

    def __init__(
        self, message: str, path: Optional[str] = None, rows: Optional[Sequence[int]] = None
    ):
        """Initialize the error.

        Args:
            message: Human readable description
            path: Offending file, if any
            rows: 1-based line numbers in that file
        """
        self.path = path
        self.rows = list(rows) if rows is not None else []
        location = ""
        if path:
            location = f"{path}"
            if self.rows:
                shown = ", ".join(str(r) for r in self.rows[:10])
                more = f" (+{len(self.rows) - 10} more)" if len(self.rows) > 10 else ""
                location += f" line(s) {shown}{more}"
            location += ": "
        super().__init__(f"{location}{message}")


class SplineError(DoseTreeError):
    """Raised when a spline basis or penalty cannot be built."""

    pass


class TreeValidityError(DoseTreeError):
    """Raised when a tree is not valid on the training covariates."""

    pass


class NumericalError(DoseTreeError):
    """Raised when a linear-algebra kernel fails."""

    def __init__(self, message: str, condition_number: Optional[float] = None):
        self.condition_number = condition_number
        if condition_number is not None:
            message = f"{message} (condition number ~ {condition_number:.3e})"
        super().__init__(message)


class ChainFormatError(DoseTreeError):
    """Raised when a chain file is not a dosetree chain or has another version."""

    pass


class SimulationError(DoseTreeError):
    """Raised when a simulation spec is invalid."""

    pass
