"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SpatialBMAError(Exception):
    exit_code = 1


class ConfigurationError(SpatialBMAError, ValueError):
    """Invalid parameters, schema violations, or malformed inputs."""

    exit_code = 2


class ParseError(ConfigurationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(SpatialBMAError, ArithmeticError):
    exit_code = 3


class EnumerationCapError(NumericalError):
    def __init__(self, n_models, cap):
        self.n_models = n_models
        self.cap = cap
        super().__init__(
            f"exact enumeration needs {n_models} models but the cap is {cap}; "
            f"raise the cap to at least {n_models} or use the sampler"
        )


class IslandError(SpatialBMAError):
    """Raised when a weight matrix has units without neighbours."""

    exit_code = 4

    def __init__(self, unit_ids, hint=None):
        self.unit_ids = tuple(unit_ids)
        message = "units without neighbours: " + ", ".join(self.unit_ids)
        if hint:
            message += f" ({hint})"
        super().__init__(message)
