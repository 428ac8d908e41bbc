"""Exception hierarchy shared by the simulation modules."""


class YbCavityError(Exception):
    pass


class ConfigError(YbCavityError, ValueError):
    """Invalid or inconsistent configuration value; carries the offending field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class NumericalError(YbCavityError, RuntimeError):
    """Base for failures of a numerical procedure (solver, fit, estimator)."""

    def __init__(self, message, module=None, segment=None):
        self.module = module
        self.segment = segment
        prefix = module + ": " if module else ""
        suffix = f" (segment {segment})" if segment is not None else ""
        super().__init__(prefix + message + suffix)


class SolverError(NumericalError):
    pass


class FitError(NumericalError):
    pass


class InsufficientStatistics(NumericalError):
    pass
