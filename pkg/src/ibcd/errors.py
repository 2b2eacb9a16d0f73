class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values and must abort."""
