"""Exception hierarchy. Every error carries a stable machine-readable ``code``."""


class CallbackIneqError(Exception):
    code = "E_GENERIC"


class DomainError(CallbackIneqError, ValueError):
    code = "E_DOMAIN"


class DataError(CallbackIneqError, ValueError):
    """Malformed or inconsistent input data."""

    code = "E_DATA"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateSampleError(DataError):
    """Sample violates the response-rate condition (no respondents or full response)."""

    code = "E_CONDITION_C2"


class ConstraintError(CallbackIneqError, ValueError):
    """The weighted constraint sum p_i (rho_i - eta) = 0 has no interior solution."""

    code = "E_CONSTRAINT"


class EstimationError(CallbackIneqError, RuntimeError):
    code = "E_ESTIMATION"

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class SingularityError(CallbackIneqError, RuntimeError):
    code = "E_CONDITION_C4"


class SelectionError(CallbackIneqError, RuntimeError):
    code = "E_SELECTION"


class NumericError(CallbackIneqError, ArithmeticError):
    code = "E_NUMERIC"


class ConfigError(CallbackIneqError, ValueError):
    """Invalid command-line flags or configuration file."""

    code = "E_CONFIG"
