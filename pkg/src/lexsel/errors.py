"""Exception and warning types shared across lexsel.

The CLI maps each exception family onto a process exit code.
"""


class LexselError(Exception):
    exit_code = 1


class ConfigError(LexselError):
    """Bad or missing configuration (columns, paths, grids)."""

    exit_code = 2


class DataError(LexselError):
    """Input file content failed validation."""

    exit_code = 3

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{':'.join(where)}: {message}"
        super().__init__(message)


class AnalysisError(LexselError):
    """An analysis cannot proceed on the given (valid) inputs."""

    exit_code = 3


class DomainError(LexselError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    exit_code = 3


class LookupFailure(LexselError, KeyError):
    exit_code = 3

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class MorphologyError(LexselError):
    exit_code = 3


class ConstructionError(LexselError):
    """A list design could not be built under its constraints."""

    exit_code = 4


class ConvergenceFailure(LexselError):
    exit_code = 4


class StageFailure(LexselError):
    """A pipeline stage aborted; keeps the cause's exit code."""

    def __init__(self, stage, path, cause):
        self.stage = stage
        self.path = path
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"stage {stage!r} failed ({path}): {cause}")


class ConvergenceWarning(UserWarning):
    pass


class DegenerateWarning(UserWarning):
    """A statistic is undefined (zero variance and the like)."""


class IngestionWarning(UserWarning):
    pass
