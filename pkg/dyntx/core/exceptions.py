from typing import Any, Dict, Optional


class DyntxError(Exception):
    """Base class for every error raised by the engine."""


class ConfigError(DyntxError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ModelValidationError(DyntxError):
    def __init__(self, violations):
        self.violations = list(violations)
        codes = ", ".join(v.code for v in self.violations)
        super().__init__(f"invalid structural model: {codes}")


class RegimeError(DyntxError):
    pass


class UnsupportedLatent(DyntxError):
    pass


class UnreachableCell(DyntxError):
    """The conditioning event has zero mass or fewer observations than the floor."""

    def __init__(self, cell: Dict[str, Any], count: Optional[float] = None, floor: Optional[float] = None):
        self.cell = cell
        self.count = count
        self.floor = floor
        detail = f"unreachable cell {cell}"
        if count is not None:
            detail += f" (mass {count}, floor {floor})"
        super().__init__(detail)


class IrrelevantInstrument(DyntxError):
    def __init__(self, t: int, cell: Dict[str, Any], propensities):
        self.t = t
        self.cell = cell
        self.propensities = tuple(propensities)
        super().__init__(
            f"instrument irrelevant at t={t} for cell {cell}: "
            f"Pr[D=1|z=1]={self.propensities[0]:.6g}, Pr[D=1|z=0]={self.propensities[1]:.6g}"
        )


class NoMatch(DyntxError):
    def __init__(self, t: int, arm: int, x: int, cell: Dict[str, Any]):
        self.t = t
        self.arm = arm
        self.x = x
        self.cell = cell
        super().__init__(f"no matching grid point at t={t} for arm d={arm}, x={x}, cell {cell}")


class AmbiguousMatch(DyntxError):
    pass


class DegenerateConditioning(DyntxError):
    pass


class TooManyFailures(DyntxError):
    def __init__(self, failures: int, replicates: int):
        self.failures = failures
        self.replicates = replicates
        super().__init__(f"{failures} of {replicates} bootstrap replicates failed")
