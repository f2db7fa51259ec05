"""Exception hierarchy shared by the library and the CLI."""


class ScotError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InputError(ScotError, ValueError):
    """Invalid arguments or inputs violating an operation's preconditions."""


class ParseError(InputError):
    """Malformed city or artifact file; message carries file and line."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class ArtifactNotFound(ScotError, FileNotFoundError):
    """A required input file or artifact is missing."""


class StabilityError(ScotError, ArithmeticError):
    """Numerical breakdown, e.g. Sinkhorn kernel underflow in scaling mode."""

    exit_code = 2


class DegenerateCouplingError(StabilityError):
    """Every row of a coupling has zero mass."""


class TrainingError(ScotError, RuntimeError):
    """Failure inside a training loop (non-finite gradients, parameters)."""

    exit_code = 2
