"""
h statistics and index matching.

For binary Z the arm statistic is

    h^d(x) = Pr[Y_t=1, D_t=d | Z_t=1, x, .] - Pr[Y_t=1, D_t=d | Z_t=0, x, .]

and h^1(x) + h^0(x_tilde) carries the sign of mu_t(., 1, x) - mu_t(., 0, x_tilde)
whenever the instrument moves the propensity upward (the sign flips otherwise).
A zero sum identifies x_tilde as an index-equivalent partner of x.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

from dyntx.core.config import settings
from dyntx.core.exceptions import IrrelevantInstrument, UnreachableCell
from dyntx.services.assumptions import check_relevance
from dyntx.services.population import Cell, PopulationEvaluator

# Configure logging
logger = logging.getLogger(__name__)


class Sign(int, Enum):
    NEGATIVE = -1
    ZERO = 0
    POSITIVE = 1


class MatchStatus(str, Enum):
    MATCHED = "Matched"
    NO_MATCH = "NoMatch"
    IRRELEVANT = "Irrelevant"


@dataclass(frozen=True)
class HStat:
    t: int
    cell: Cell
    arm: Optional[int]
    x: int
    x_tilde: Optional[int]
    value: float
    std_error: float


@dataclass(frozen=True)
class Candidate:
    """One grid point scanned as a partner of x for the given arm."""

    x_tilde: int
    h_sum: float
    residual: float
    tolerance: float
    sign: Sign

    @property
    def matched(self) -> bool:
        return self.residual <= self.tolerance


@dataclass(frozen=True)
class MatchSet:
    t: int
    cell: Cell
    arm: int
    x: int
    matches: Tuple[Tuple[int, float], ...]
    status: MatchStatus
    tolerance: float

    @property
    def best(self) -> int:
        return self.matches[0][0]


def h_tolerance(ev: PopulationEvaluator, std_error: float, tol: Optional[float] = None) -> float:
    if tol is not None:
        return tol
    if ev.is_exact:
        return settings.H_TOL_EXACT
    return max(settings.H_TOL_SE_MULTIPLIER * std_error, 1e-12)


def compute_h_general(
    ev: PopulationEvaluator, history: Cell, z: int, z_tilde: int, x: int, x_tilde: int
) -> HStat:
    """
    Four-term contrast
    P[Y=1,D=1|z,x] + P[Y=1,D=0|z,x_tilde] - P[Y=1,D=1|z_tilde,x] - P[Y=1,D=0|z_tilde,x_tilde].
    """
    a = ev.joint(history, z, x, 1, 1)
    b = ev.joint(history, z, x_tilde, 1, 0)
    c = ev.joint(history, z_tilde, x, 1, 1)
    e = ev.joint(history, z_tilde, x_tilde, 1, 0)
    value = (a.estimate - c.estimate) + (b.estimate - e.estimate)
    std_error = 0.0 if z == z_tilde else math.sqrt(sum(s.std_error ** 2 for s in (a, b, c, e)))
    return HStat(history.t + 1, history, None, x, x_tilde, value, std_error)


def compute_h_arm(ev: PopulationEvaluator, history: Cell, d: int, x: int) -> HStat:
    """P[Y_t=1, D_t=d | Z_t=1, x, .] - P[Y_t=1, D_t=d | Z_t=0, x, .]."""
    high = ev.joint(history, 1, x, 1, d)
    low = ev.joint(history, 0, x, 1, d)
    return HStat(
        history.t + 1,
        history,
        d,
        x,
        None,
        high.estimate - low.estimate,
        math.sqrt(high.std_error ** 2 + low.std_error ** 2),
    )


def _require_relevance(ev: PopulationEvaluator, history: Cell, relevance_tol: Optional[float]) -> int:
    """Return +1 when z=1 raises the propensity, -1 when it lowers it."""
    check = check_relevance(ev, history, relevance_tol)
    if not check.relevant:
        raise IrrelevantInstrument(check.t, check.cell, (check.propensity_z1, check.propensity_z0))
    return 1 if check.gap > 0 else -1


def _to_sign(value: float, tolerance: float) -> Sign:
    if abs(value) <= tolerance:
        return Sign.ZERO
    return Sign.POSITIVE if value > 0 else Sign.NEGATIVE


def sign_mu_gap(
    ev: PopulationEvaluator,
    history: Cell,
    x: int,
    x_tilde: int,
    tol: Optional[float] = None,
    relevance_tol: Optional[float] = None,
) -> Sign:
    """
    Sign of mu_t(y^{t-1}, d^{t-1}, 1, x) - mu_t(y^{t-1}, d^{t-1}, 0, x_tilde) read off the data.

    Raises:
        IrrelevantInstrument: when the instrument does not move the propensity in this cell
    """
    orientation = _require_relevance(ev, history, relevance_tol)
    h = compute_h_general(ev, history, 1, 0, x, x_tilde)
    sign = _to_sign(h.value, h_tolerance(ev, h.std_error, tol))
    return Sign(sign * orientation)


def scan_candidates(
    ev: PopulationEvaluator,
    history: Cell,
    arm: int,
    x: int,
    tol: Optional[float] = None,
    relevance_tol: Optional[float] = None,
) -> List[Candidate]:
    """
    Scan every grid point x_tilde (x itself included) as a partner of (arm, x).

    Each candidate carries |h^{arm}(x) + h^{1-arm}(x_tilde)| and the sign of
    mu_t(., arm, x) - mu_t(., 1 - arm, x_tilde). Grid points whose cells are
    unreachable are left out.
    """
    orientation = _require_relevance(ev, history, relevance_tol)
    source = compute_h_arm(ev, history, arm, x)
    direction = 1 if arm == 1 else -1
    candidates = []
    for x_tilde in range(ev.grid_sizes[history.t]):
        try:
            partner = compute_h_arm(ev, history, 1 - arm, x_tilde)
        except UnreachableCell:
            continue
        h_sum = source.value + partner.value
        std_error = math.sqrt(source.std_error ** 2 + partner.std_error ** 2)
        tolerance = h_tolerance(ev, std_error, tol)
        sign = Sign(direction * orientation * _to_sign(h_sum, tolerance))
        candidates.append(Candidate(x_tilde, h_sum, abs(h_sum), tolerance, sign))
    return candidates


def match_lambda(
    ev: PopulationEvaluator,
    history: Cell,
    arm: int,
    x: int,
    tol: Optional[float] = None,
    relevance_tol: Optional[float] = None,
) -> MatchSet:
    """
    Grid points x_tilde with h^{arm}(x) + h^{1-arm}(x_tilde) = 0 within tolerance.

    Args:
        ev: Population evaluator
        history: Conditioning cell (z^{t-1}, x^{t-1}, d^{t-1}, y^{t-1})
        arm: Treatment value d_t whose index is matched
        x: Source grid index x_t
        tol: Zero tolerance (exact default 1e-6; counting default 3 standard errors)
        relevance_tol: Relevance tolerance

    Returns:
        MatchSet sorted by residual
    """
    candidates = scan_candidates(ev, history, arm, x, tol, relevance_tol)
    matches = sorted(((c.x_tilde, c.residual) for c in candidates if c.matched), key=lambda m: (m[1], m[0]))
    tolerance = max((c.tolerance for c in candidates), default=h_tolerance(ev, 0.0, tol))
    status = MatchStatus.MATCHED if matches else MatchStatus.NO_MATCH
    logger.debug(
        f"Matching at t={history.t + 1}, arm={arm}, x={x}, cell={history.describe()}: "
        f"{status.value} {matches}"
    )
    return MatchSet(history.t + 1, history, arm, x, tuple(matches), status, tolerance)
