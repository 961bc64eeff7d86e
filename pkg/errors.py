"""
Exception hierarchy for attentivo.

Validation-type errors also subclass ValueError so callers that only know the builtin
still catch them. The CLI maps everything to exit code 2 except the degenerate-run family (3).
"""

from typing import Iterable, List, Optional, Sequence


class AttentivoError(Exception):
    """Base class for all attentivo errors."""

    exit_code = 2


class InvalidArgumentError(AttentivoError, ValueError):
    pass


class DegenerateRotationError(AttentivoError, ValueError):
    """Rotation angle too close to pi for the axis to be well defined."""


class DegenerateInputError(AttentivoError, ValueError):
    """Point configuration does not constrain the model (rank deficient)."""


class InsufficientDataError(AttentivoError, ValueError):
    pass


class NoConsensusError(AttentivoError):
    pass


class AmbiguousPoseError(AttentivoError):
    def __init__(self, tied: Sequence[int], support: int):
        self.tied = list(tied)
        self.support = support
        super().__init__(f"Cheirality tie between candidates {self.tied} with {support} positive-depth points")


class ParseError(AttentivoError, ValueError):
    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(f"{where}{message}")


class DataIntegrityError(ParseError):
    pass


class DatasetNotFoundError(AttentivoError, FileNotFoundError):
    def __init__(self, missing: Iterable[str]):
        self.missing: List[str] = [str(m) for m in missing]
        super().__init__(f"{len(self.missing)} referenced file(s) not found: " + ", ".join(self.missing))


class SceneTooSparseError(AttentivoError, ValueError):
    pass


class TrainingDivergedError(AttentivoError):
    exit_code = 3

    def __init__(self, epoch: int, last_finite_epoch: Optional[int]):
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch
        super().__init__(f"Loss became non-finite at epoch {epoch} (last finite epoch: {last_finite_epoch})")


class RunDegenerateError(AttentivoError):
    exit_code = 3


class ReportIOError(AttentivoError, OSError):
    pass
