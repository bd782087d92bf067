"""Exception hierarchy shared by every eat-ood module.

Each error class carries the exit code the CLI returns when it escapes a
subcommand.
"""
from typing import Optional


class EatOodError(Exception):
    """Base class for all eat-ood failures."""

    exit_code = 1


class ConfigurationError(EatOodError):
    exit_code = 2


class MissingFileError(EatOodError):
    exit_code = 3


class DataParseError(EatOodError):
    """A data or score file could not be parsed."""

    exit_code = 4

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}"
        if line is not None:
            location = f"{location}:{line}" if location else f"line {line}"
        super().__init__(f"{location}: {message}" if location else message)


class TrainingDivergedError(EatOodError):
    exit_code = 5

    def __init__(self, message: str, epoch: int, step: int):
        self.epoch = epoch
        self.step = step
        super().__init__(f"{message} (epoch {epoch}, step {step})")


class NumericDomainError(EatOodError):
    exit_code = 6


class GradientOracleError(NumericDomainError):
    """The finite-difference oracle hit a non-finite objective value."""

    def __init__(self, message: str, probe_index: int):
        self.probe_index = probe_index
        super().__init__(f"{message} (probe index {probe_index})")


class UndefinedMetricError(EatOodError):
    exit_code = 7


class ContractViolation(EatOodError):
    """A caller broke an operation's precondition."""

    exit_code = 8
