from __future__ import annotations

from typing import Any, Dict, List, Optional


class NudgeError(Exception):
    """Base for every error the pipeline reports to a caller."""

    code = "nudge_error"

    def __init__(self, message: str, **context: Any) -> None:
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = context

    def as_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {"status": "error", "code": self.code, "message": self.message}
        record.update({k: v for k, v in self.context.items() if _plain(v)})
        return record


def _plain(value: Any) -> bool:
    return isinstance(value, (str, int, float, bool, list, tuple, type(None)))


class ShapeError(NudgeError, ValueError):
    code = "shape_mismatch"


class NonFiniteError(NudgeError, FloatingPointError):
    code = "non_finite"


class MissingGradientError(NudgeError, KeyError):
    code = "missing_gradient"

    def __str__(self) -> str:
        return self.message


class ConfigError(NudgeError, ValueError):
    code = "config_invalid"

    def __init__(self, message: str, violations: Optional[List[str]] = None) -> None:
        super().__init__(message, violations=list(violations or []))
        self.violations = list(violations or [])


class DegenerateChannelError(NudgeError, ValueError):
    code = "degenerate_channel"


class SplitOverlapError(NudgeError, ValueError):
    code = "split_overlap"


class HorizonError(NudgeError, ValueError):
    code = "horizon_mismatch"


class BlowUpError(NudgeError, FloatingPointError):
    code = "blow_up"

    def __init__(self, message: str, step: int, provenance: str = "") -> None:
        super().__init__(message, step=step, provenance=provenance)
        self.step = step


class TrainingDivergedError(NudgeError, FloatingPointError):
    code = "training_diverged"

    def __init__(self, message: str, epoch: int, last_good: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message, epoch=epoch)
        self.epoch = epoch
        self.last_good = last_good


class DigestError(NudgeError, ValueError):
    code = "digest_mismatch"


class VersionError(NudgeError, ValueError):
    code = "version_mismatch"


class SingularSystemError(NudgeError, ValueError):
    code = "singular_system"


class DegenerateSeriesError(NudgeError, ValueError):
    code = "degenerate_variance"


class StatsMismatchError(NudgeError, ValueError):
    code = "stats_mismatch"


class LinearizationError(NudgeError, ValueError):
    code = "not_linearizable"
