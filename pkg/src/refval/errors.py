"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
numeric/solver failures exit 3, I/O and file-format problems exit 4.
"""


class RefvalError(Exception):
    """Base class for all package errors."""


class DimensionError(RefvalError):
    """Vector/matrix shapes do not line up."""


class NumericError(RefvalError):
    """NaN/Inf where a finite value is required."""


class ParameterError(RefvalError):
    """An argument is outside its documented domain."""


class SchemaError(RefvalError):
    """A dataset schema names columns that do not exist or conflict."""


class ParseError(RefvalError):
    """File content could not be parsed (carries row/field context)."""


class FormatError(RefvalError):
    """Binary file format mismatch (bad magic, truncation, count mismatch)."""


class StoreError(RefvalError):
    """A trajectory store is missing records needed for valuation."""


class SolverError(RefvalError):
    """Iterative solver failed to converge; message reports the residual."""


class ConfigError(RefvalError):
    """Experiment configuration is invalid or inconsistent."""


class HookError(RefvalError):
    """A training hook raised; records the step at which it happened."""

    def __init__(self, step: int, message: str):
        super().__init__(f"hook failed at step {step}: {message}")
        self.step = step
