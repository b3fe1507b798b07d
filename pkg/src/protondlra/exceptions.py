"""Exception types raised across the package."""


class TableParseError(ValueError):
    """A tabulated physics file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DomainError(ValueError):
    """A query fell outside the range covered by a table or mesh."""


class AccuracyError(RuntimeError):
    """An adaptive quadrature failed to reach its tolerance."""


class AssemblyError(RuntimeError):
    """An operator could not be assembled consistently."""


class SolverError(RuntimeError):
    """A transport or integrator step failed."""


class ConfigError(ValueError):
    """Invalid run configuration."""
