"""Exception hierarchy shared across the package.

The four bases map onto the CLI exit-code categories (config=2, data=3,
numeric=4, io=5); library code raises the specific subclasses.
"""


class HomognetError(Exception):
    pass


class ConfigError(HomognetError):
    """Invalid user-supplied configuration or parameters."""


class DataError(HomognetError):
    """Inconsistent or malformed data content (shapes, formats, hashes)."""


class NumericError(HomognetError):
    """Numerical failure such as solver non-convergence or NaN loss."""


class IoError(HomognetError):
    """Filesystem level failure."""


class UnsatisfiableSpecError(ConfigError):
    """Inclusion placement could not satisfy the requested volume fraction."""


class SolverConvergenceError(NumericError):
    """Fixed-point / Krylov iteration did not reach the tolerance.

    Carries the residual history for diagnostics.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []
