"""Exception hierarchy"""
from typing import Optional


class FluidSchedError(Exception):
    """Base class for every error raised by fluidsched"""


class DomainError(FluidSchedError, ValueError):
    """An argument lies outside the domain of the model"""


class InfeasibleError(FluidSchedError):
    """The constraint set of an allocation problem is empty"""

    def __init__(self, message: str, criterion: str):
        super().__init__(f"{message} [{criterion}]")
        self.criterion = criterion


class StateFileError(FluidSchedError):
    """A state or trace file could not be parsed"""

    def __init__(
        self,
        message: str,
        path: str = "<string>",
        line: Optional[int] = None,
        column: Optional[int] = None,
    ):
        location = path
        if line is not None:
            location += f":{line}"
            if column is not None:
                location += f":{column}"
        super().__init__(f"{location}: {message}")
        self.path = path
        self.line = line
        self.column = column
