"""
Error taxonomy for corrmed.

Library code raises these; only decomp.py turns them into exit codes.
Exit codes: 0 success, 2 usage, 3 data validation, 4 model fitting,
5 degenerate contrast.
"""
from __future__ import annotations


class DecompError(Exception):
    """Base class. `kind` is the machine-parsable class name printed by the CLI."""

    exit_code = 1
    kind = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return self.message


class UsageError(DecompError):
    exit_code = 2
    kind = "usage"


class ConfigurationError(DecompError):
    """Bad config file, unknown key, or a role column missing from the data."""

    exit_code = 2
    kind = "configuration"


class ValidationError(DecompError):
    exit_code = 3
    kind = "validation"


class DomainError(DecompError, ValueError):
    """Numeric argument outside the function's domain (|rho| >= 1, p outside (0,1))."""

    exit_code = 2
    kind = "domain"


class DesignError(DecompError):
    exit_code = 4
    kind = "design"


class ModelFitError(DecompError):
    exit_code = 4
    kind = "model-fit"


class SeparationError(ModelFitError):
    kind = "separation"


class ConvergenceError(ModelFitError):
    kind = "nonconvergence"


class NumericalError(ModelFitError):
    kind = "numerical"


class StudyError(DecompError):
    exit_code = 4
    kind = "study"


class DegenerateContrastError(DecompError):
    exit_code = 5
    kind = "degenerate-contrast"
