"""
Testable content of the identifying assumptions: instrument relevance per
history cell and the empirical support sets used for index matching.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from dyntx.core.config import settings
from dyntx.core.exceptions import UnreachableCell
from dyntx.models.structural import Bits, bits_to_string, treatment_carryover
from dyntx.services.population import Cell, PopulationEvaluator

# Configure logging
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelevanceCheck:
    t: int
    cell: Dict[str, object]
    relevant: bool
    propensity_z1: float
    propensity_z0: float
    tolerance: float

    @property
    def gap(self) -> float:
        return self.propensity_z1 - self.propensity_z0


def relevance_tolerance(ev: PopulationEvaluator, se_z1: float, se_z0: float, tol: Optional[float] = None) -> float:
    if tol is not None:
        return tol
    if ev.is_exact:
        return settings.RELEVANCE_TOL
    return settings.RELEVANCE_SE_MULTIPLIER * math.sqrt(se_z1 ** 2 + se_z0 ** 2)


def check_relevance(ev: PopulationEvaluator, history: Cell, tol: Optional[float] = None) -> RelevanceCheck:
    """
    Compare Pr[D_t=1 | z_t=1, history] with Pr[D_t=1 | z_t=0, history].

    Args:
        ev: Population evaluator
        history: Conditioning cell (z^{t-1}, x^{t-1}, d^{t-1}, y^{t-1})
        tol: Gap tolerance; defaults to RELEVANCE_TOL (exact) or a multiple of the gap's standard error

    Returns:
        RelevanceCheck with both propensities
    """
    treated_z1 = ev.propensity(history, 1, 1)
    treated_z0 = ev.propensity(history, 0, 1)
    tolerance = relevance_tolerance(ev, treated_z1.std_error, treated_z0.std_error, tol)
    relevant = abs(treated_z1.estimate - treated_z0.estimate) > tolerance
    return RelevanceCheck(
        t=history.t + 1,
        cell=history.describe(),
        relevant=relevant,
        propensity_z1=treated_z1.estimate,
        propensity_z0=treated_z0.estimate,
        tolerance=tolerance,
    )


@dataclass(frozen=True)
class SupportSets:
    """
    Empirical support sets for period t and treatment history d^t.

    ``matched`` (S_t) and ``rectangular`` (T_t) hold (x, x_tilde) pairs per
    y-history; ``identified_by_history`` is X_t(d^t; y^{t-1}) and
    ``identified`` its intersection over reachable y-histories.
    """

    t: int
    d: Bits
    matched: Dict[str, Tuple[Tuple[int, int], ...]]
    rectangular: Dict[str, Tuple[Tuple[int, int], ...]]
    identified_by_history: Dict[str, Tuple[int, ...]]
    identified: Tuple[int, ...]
    reachable_histories: int = 0

    @property
    def nonempty(self) -> bool:
        return len(self.identified) > 0


def _rectangular(ev: PopulationEvaluator, history: Cell, x: int, x_tilde: int) -> bool:
    for z in (0, 1):
        for value in (x, x_tilde):
            if not ev.reachable(history.extend(z=z, x=value)):
                return False
    return True


def check_support(
    ev: PopulationEvaluator,
    t: int,
    d: Sequence[int],
    z_history: Sequence[int] = (),
    x_history: Sequence[int] = (),
    tol: Optional[float] = None,
) -> SupportSets:
    """
    Empirical analogs of the support sets for period t (1-based) and d^t.

    Args:
        ev: Population evaluator
        t: Period
        d: Treatment history d^t (length t)
        z_history: Conditioning instruments z^{t-1}
        x_history: Conditioning exogenous values x^{t-1}
        tol: Matching tolerance passed to the h-statistic scan

    Returns:
        SupportSets; unreachable y-histories are skipped
    """
    from dyntx.services.matching import scan_candidates

    d = tuple(int(b) for b in d)
    if len(d) != t or len(z_history) != t - 1 or len(x_history) != t - 1:
        raise ValueError(f"support query at t={t} needs d^t and (t-1)-long z/x histories")
    arm = d[-1]
    K = ev.grid_sizes[t - 1]
    matched, rectangular, by_history = {}, {}, {}
    identified: Optional[Set[int]] = None

    for ys in itertools.product((0, 1), repeat=t - 1):
        history = Cell(tuple(z_history), tuple(x_history), ys, d[:-1])
        if not ev.reachable(history):
            continue
        key = bits_to_string(ys)
        pairs_s: List[Tuple[int, int]] = []
        pairs_t: List[Tuple[int, int]] = []
        try:
            relevant = check_relevance(ev, history).relevant
        except UnreachableCell:
            relevant = False
        for x in range(K):
            try:
                candidates = scan_candidates(ev, history, arm, x, tol) if relevant else []
            except UnreachableCell:
                candidates = []
            pairs_s.extend((x, c.x_tilde) for c in candidates if c.matched)
            for x_tilde in range(K):
                if relevant and _rectangular(ev, history, x, x_tilde):
                    pairs_t.append((x, x_tilde))
        both = set(pairs_s) & set(pairs_t)
        xs = tuple(sorted({x for x, _ in both}))
        matched[key] = tuple(pairs_s)
        rectangular[key] = tuple(pairs_t)
        by_history[key] = xs
        identified = set(xs) if identified is None else identified & set(xs)

    return SupportSets(
        t=t,
        d=d,
        matched=matched,
        rectangular=rectangular,
        identified_by_history=by_history,
        identified=tuple(sorted(identified or ())),
        reachable_histories=len(by_history),
    )


@dataclass
class AssumptionReport:
    relevance: List[RelevanceCheck] = field(default_factory=list)
    sp_support: List[SupportSets] = field(default_factory=list)
    sx_note: str = ""
    unverifiable: List[str] = field(default_factory=list)
    carryover: List[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (
            all(check.relevant for check in self.relevance)
            and all(s.nonempty for s in self.sp_support)
            and not self.carryover
        )

    def to_dict(self) -> Dict[str, object]:
        return {
            "passed": self.passed,
            "relevance": [
                {
                    "t": c.t,
                    "cell": c.cell,
                    "relevant": c.relevant,
                    "propensities": [c.propensity_z1, c.propensity_z0],
                    "tolerance": c.tolerance,
                }
                for c in self.relevance
            ],
            "sp_support": [
                {
                    "t": s.t,
                    "d": bits_to_string(s.d),
                    "S": {k: [list(p) for p in v] for k, v in s.matched.items()},
                    "T": {k: [list(p) for p in v] for k, v in s.rectangular.items()},
                    "X_by_history": {k: list(v) for k, v in s.identified_by_history.items()},
                    "X": list(s.identified),
                    "nonempty": s.nonempty,
                }
                for s in self.sp_support
            ],
            "sx_note": self.sx_note,
            "unverifiable": self.unverifiable,
            "carryover": self.carryover,
        }


def assess_assumptions(
    ev: PopulationEvaluator,
    from_model: bool,
    x_history: Optional[Sequence[int]] = None,
    tol: Optional[float] = None,
) -> AssumptionReport:
    """
    Relevance in every reachable history cell and support sets for every (t, d^t).

    Args:
        ev: Population evaluator
        from_model: Whether the evaluator comes from a configured structural model
        x_history: Restrict histories to this x path (default: every grid path)
        tol: Matching tolerance

    Returns:
        AssumptionReport
    """
    report = AssumptionReport(
        sx_note=(
            "satisfied by construction: instruments and exogenous variables are drawn independently of latents"
            if from_model
            else "not verifiable from observational data; assumed"
        ),
        unverifiable=[] if from_model else ["sequential exogeneity", "rank similarity"],
    )
    model = getattr(ev, "model", None)
    if from_model and model is not None:
        report.carryover = treatment_carryover(model)
    T = ev.horizon
    for t in range(1, T + 1):
        if x_history is None:
            x_paths = list(itertools.product(*[range(ev.grid_sizes[s]) for s in range(t - 1)]))
        else:
            x_paths = [tuple(x_history[: t - 1])]
        for z_hist in itertools.product((0, 1), repeat=t - 1):
            for x_hist in x_paths:
                for d_prev in itertools.product((0, 1), repeat=t - 1):
                    for ys in itertools.product((0, 1), repeat=t - 1):
                        history = Cell(z_hist, x_hist, ys, d_prev)
                        if not ev.reachable(history):
                            continue
                        try:
                            report.relevance.append(check_relevance(ev, history))
                        except UnreachableCell as exc:
                            logger.debug(f"Skipping relevance check: {exc}")
                    for arm in (0, 1):
                        support = check_support(ev, t, d_prev + (arm,), z_hist, x_hist, tol)
                        if support.reachable_histories:
                            report.sp_support.append(support)
    logger.info(
        f"Assumption report: {len(report.relevance)} relevance cells, "
        f"{len(report.sp_support)} support sets, passed={report.passed}"
    )
    return report
