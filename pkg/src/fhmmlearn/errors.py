"""Exception types shared across the package."""


class FhmmError(Exception):
    """Base class for all library errors."""


class DataError(FhmmError):
    """Bad input data, corrupt files, or mismatched model dimensions."""


class NumericError(FhmmError):
    """Numerical failure: degenerate parameters or a diverged update."""
