from typing import Any, Dict, Optional

# Process exit codes
EXIT_OK = 0
EXIT_VALIDATION_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INCONCLUSIVE = 4
EXIT_OUTPUT = 5
EXIT_SPECTRAL_FLOOR = 6


class RcmError(Exception):
    """Base error carrying an exit code and a human readable detail"""

    exit_code = EXIT_NUMERICAL

    def __init__(self, detail: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(detail)
        self.detail = detail
        self.context = context or {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "detail": self.detail,
            "exit_code": self.exit_code,
            "context": self.context,
        }


class ConfigError(RcmError):
    exit_code = EXIT_CONFIG


class OutputError(RcmError):
    exit_code = EXIT_OUTPUT


class NumericalPreconditionError(RcmError):
    exit_code = EXIT_NUMERICAL


class GuardViolation(NumericalPreconditionError):
    """Box or grid too small for the support it has to hold"""


class GeometryMismatch(NumericalPreconditionError):
    pass


class SubcriticalGuardError(NumericalPreconditionError):
    pass


class QuadratureError(NumericalPreconditionError):
    pass


class ConvergenceError(NumericalPreconditionError):
    pass


class EliminationBudgetError(NumericalPreconditionError):
    pass


class GraphLimitError(NumericalPreconditionError):
    pass


class SpectralFloorError(NumericalPreconditionError):
    exit_code = EXIT_SPECTRAL_FLOOR
