# harmctl/errors.py

from typing import Any, Dict, Optional


class HarmCtlError(Exception):
    """
    Base class for every error the library raises on purpose.
    The CLI turns these into a JSON error object and an exit code,
    the same way an HTTP service maps exceptions to status codes.
    """
    exit_code: int = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": self.code,
            "message": self.message,
            "details": self.details,
        }


# --- Configuration errors (exit 1) ---

class ConfigInvalid(HarmCtlError):
    exit_code = 1


class LambdaOutOfRange(ConfigInvalid):
    def __init__(self, lam: float, upper: float):
        super().__init__(f"lambda={lam} is outside [0, {upper}]", lam=lam, upper=upper)


class EmptyGrid(ConfigInvalid):
    pass


class InvalidProfile(ConfigInvalid):
    pass


# --- Calibration errors (exit 2) ---

class CalibrationError(HarmCtlError):
    exit_code = 2


class AlphaTooSmall(CalibrationError):
    def __init__(self, alpha: float, n: int, minimum: Optional[float] = None):
        minimum = 1.0 / (n + 1) if minimum is None else minimum
        super().__init__(
            f"alpha={alpha} is below {minimum:.6g}; no threshold can be certified with n={n}",
            alpha=alpha,
            n=n,
            minimum=minimum,
        )


class Infeasible(CalibrationError):
    pass


class AlphaSplitInvalid(CalibrationError):
    pass


# --- Data errors (exit 3) ---

class DataError(HarmCtlError):
    exit_code = 3


class MissingColumn(DataError):
    def __init__(self, column: str, path: Optional[str] = None):
        super().__init__(f"missing column '{column}'", column=column, path=path)


class ScoreOutOfRange(DataError):
    def __init__(self, row: int, reason: str):
        super().__init__(f"row {row}: {reason}", row=row)


class DuplicateInstance(DataError):
    def __init__(self, instance_id: str):
        super().__init__(f"instance '{instance_id}' appears more than once", instance_id=instance_id)


class UnknownLabel(DataError):
    def __init__(self, name: str, row: Optional[int] = None):
        super().__init__(f"label '{name}' is not in the label space", name=name, row=row)


class ConflictingLabel(DataError):
    def __init__(self, instance_id: str):
        super().__init__(
            f"instance '{instance_id}' has more than one ground-truth label",
            instance_id=instance_id,
        )


class OrphanPrediction(DataError):
    def __init__(self, instance_id: str):
        super().__init__(
            f"prediction for '{instance_id}' has no score vector or true label",
            instance_id=instance_id,
        )


class EmptyDataset(DataError):
    def __init__(self, message: str = "dataset is empty"):
        super().__init__(message)


class EmptyStratum(DataError):
    def __init__(self, stratum: int):
        super().__init__(f"difficulty stratum {stratum} has no predictions", stratum=stratum)


class DegenerateRow(DataError):
    def __init__(self, stratum: int, label: int):
        super().__init__(
            f"confusion row for label {label} in stratum {stratum} has no mass on the set",
            stratum=stratum,
            label=label,
        )


class UnreadableFile(DataError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"cannot read {path}: {reason}", path=path)
