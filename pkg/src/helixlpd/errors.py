"""Exception types shared across modules (the CLI maps them to exit codes)."""


class DataError(ValueError):
    """Inputs are inconsistent with each other or with their declared metadata."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or diverged."""
