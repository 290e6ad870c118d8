"""
Regime enumeration and ranking by identified (or bounded) objectives.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from joblib import Parallel, delayed

from dyntx.core.config import settings
from dyntx.core.exceptions import RegimeError
from dyntx.models.structural import Regime
from dyntx.services.identify import IdentStatus, identify_arsf
from dyntx.services.population import PopulationEvaluator
from dyntx.services.recursion import RecursionOptions

# Configure logging
logger = logging.getLogger(__name__)


class ObjectiveKind(str, Enum):
    TERMINAL_ARSF = "TerminalARSF"
    WEIGHTED_SUM = "WeightedSum"


class RankingStatus(str, Enum):
    DECIDED = "Decided"
    PARTIAL = "Partial"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class ObjectiveSpec:
    """
    TerminalARSF: w * E[Y_T(d)] - cost * sum_t d_t.
    WeightedSum:  sum_t w_t * E[Y_t(d)] - sum_t cost_t * d_t.
    """

    kind: ObjectiveKind = ObjectiveKind.TERMINAL_ARSF
    weight: float = 1.0
    cost: float = 0.0
    weights: Tuple[float, ...] = ()
    costs: Tuple[float, ...] = ()

    @classmethod
    def terminal(cls, weight: float = 1.0, cost: float = 0.0) -> "ObjectiveSpec":
        return cls(ObjectiveKind.TERMINAL_ARSF, float(weight), float(cost))

    @classmethod
    def weighted_sum(cls, weights: Sequence[float], costs: Optional[Sequence[float]] = None) -> "ObjectiveSpec":
        weights = tuple(float(w) for w in weights)
        costs = tuple(float(c) for c in costs) if costs is not None else (0.0,) * len(weights)
        return cls(ObjectiveKind.WEIGHTED_SUM, weights=weights, costs=costs)

    def check(self, T: int) -> None:
        values = (self.weight, self.cost) + self.weights + self.costs
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"objective weights must be finite: {self}")
        if self.kind == ObjectiveKind.WEIGHTED_SUM and (len(self.weights) != T or len(self.costs) != T):
            raise ValueError(f"weighted-sum objective needs {T} weights and {T} costs")

    def scaled(self, factor: float) -> "ObjectiveSpec":
        return ObjectiveSpec(
            self.kind,
            self.weight * factor,
            self.cost * factor,
            tuple(w * factor for w in self.weights),
            tuple(c * factor for c in self.costs),
        )

    def period_weights(self, T: int) -> Tuple[float, ...]:
        if self.kind == ObjectiveKind.TERMINAL_ARSF:
            return (0.0,) * (T - 1) + (self.weight,)
        return self.weights

    def treatment_cost(self, regime: Regime) -> float:
        treated = [regime.d[s] if regime.is_active(s) else 0 for s in range(regime.T)]
        if self.kind == ObjectiveKind.TERMINAL_ARSF:
            return self.cost * sum(treated)
        return sum(c * d for c, d in zip(self.costs, treated))

    def to_dict(self) -> Dict[str, object]:
        if self.kind == ObjectiveKind.TERMINAL_ARSF:
            return {"kind": self.kind.value, "weight": self.weight, "cost": self.cost}
        return {"kind": self.kind.value, "weights": list(self.weights), "costs": list(self.costs)}


@dataclass
class RegimeValue:
    regime: Regime
    lo: float
    hi: float
    point: bool
    arsf: Dict[int, Tuple[float, float]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        payload = {"regime": self.regime.label}
        if self.point:
            payload["value"] = self.lo
        else:
            payload["interval"] = [self.lo, self.hi]
        payload["arsf"] = {str(t): list(v) for t, v in self.arsf.items()}
        return payload


@dataclass
class RegimeRanking:
    stratum: Optional[int]
    objective: ObjectiveSpec
    entries: List[RegimeValue]
    argmax: List[str]
    excluded: List[str]
    status: RankingStatus

    def to_dict(self) -> Dict[str, object]:
        return {
            "stratum": self.stratum,
            "objective": self.objective.to_dict(),
            "table": [entry.to_dict() for entry in self.entries],
            "argmax": self.argmax,
            "excluded": self.excluded,
            "status": self.status.value,
        }


def enumerate_regimes(T: int, mask: Optional[Sequence[int]] = None, irreversible: bool = False) -> List[Regime]:
    """
    Every regime over the active periods of ``mask``; monotone ones only when treatment is irreversible.
    """
    active = tuple(int(b) for b in mask) if mask is not None else (1,) * T
    if len(active) != T:
        raise RegimeError(f"regime length mismatch: mask has {len(active)} periods, horizon is {T}")
    positions = [s for s in range(T) if active[s]]
    regimes = []
    for bits in itertools.product((0, 1), repeat=len(positions)):
        d = [0] * T
        for s, bit in zip(positions, bits):
            d[s] = bit
        regime = Regime(tuple(d), active)
        if irreversible and not regime.is_monotone():
            continue
        regimes.append(regime)
    return regimes


def exclusion_set(entries: Sequence[RegimeValue]) -> List[str]:
    """Regimes whose upper bound lies strictly below some other regime's lower bound."""
    best_lo = {entry.regime.label: max((o.lo for o in entries if o is not entry), default=-math.inf) for entry in entries}
    return [entry.regime.label for entry in entries if best_lo[entry.regime.label] > entry.hi]


def _x_vectors(ev: PopulationEvaluator, x: Optional[Sequence[int]]) -> List[Tuple[Tuple[int, ...], float]]:
    if x is not None:
        return [(tuple(int(v) for v in x), 1.0)]
    vectors = []
    for xs in itertools.product(*[range(k) for k in ev.grid_sizes]):
        weight = ev.x_law(xs)
        if weight > 0.0:
            vectors.append((xs, weight))
    return vectors


def _evaluate_regime(
    ev: PopulationEvaluator,
    regime: Regime,
    objective: ObjectiveSpec,
    x_vectors: List[Tuple[Tuple[int, ...], float]],
    options: Optional[RecursionOptions],
) -> RegimeValue:
    T = ev.horizon
    lo = hi = -objective.treatment_cost(regime)
    point = True
    arsf = {}
    for s, w in enumerate(objective.period_weights(T)):
        if w == 0.0:
            continue
        a_lo = a_hi = 0.0
        for xs, weight in x_vectors:
            result = identify_arsf(ev, regime, xs, options, horizon=s + 1)
            if result.status == IdentStatus.FAILED:
                raise RegimeError(f"ARSF of regime {regime.label} at x={xs} failed: {result.message}")
            point = point and result.status == IdentStatus.POINT
            a_lo += weight * result.lo
            a_hi += weight * result.hi
        arsf[s + 1] = (a_lo, a_hi)
        lo += w * (a_lo if w > 0 else a_hi)
        hi += w * (a_hi if w > 0 else a_lo)
    return RegimeValue(regime, lo, hi, point, arsf)


def rank_regimes(
    ev: PopulationEvaluator,
    objective: ObjectiveSpec,
    regimes: Optional[Sequence[Regime]] = None,
    x: Optional[Sequence[int]] = None,
    stratum: Optional[int] = None,
    options: Optional[RecursionOptions] = None,
    irreversible_d: Optional[bool] = None,
    n_jobs: Optional[int] = None,
) -> RegimeRanking:
    """
    Rank regimes by the objective within one stratum.

    Args:
        ev: Population evaluator of the stratum
        objective: Objective specification
        regimes: Candidate regimes (default: every admissible regime)
        x: Fix the exogenous vector; by default ARSFs are averaged over Pr[X = x]
        stratum: Stratum label w0 recorded in the result
        options: Recursion options (set fallback_bounds to rank under bounds)
        irreversible_d: Absorbing-treatment policy (default: the evaluator's model)
        n_jobs: Parallel jobs over regimes

    Returns:
        RegimeRanking with the argmax set and the excluded set
    """
    T = ev.horizon
    objective.check(T)
    model = getattr(ev, "model", None)
    if irreversible_d is None:
        irreversible_d = bool(model is not None and model.irreversible_d)
    if regimes is None:
        regimes = enumerate_regimes(T, irreversible=irreversible_d)
    regimes = list(regimes)
    if not regimes:
        raise RegimeError("empty regime set")
    for regime in regimes:
        if regime.T != T:
            raise RegimeError(f"regime length mismatch: regime {regime.label} has {regime.T} periods, horizon is {T}")
        if irreversible_d and not regime.is_monotone():
            raise RegimeError(f"regime {regime.label} violates the irreversible-treatment policy")

    x_vectors = _x_vectors(ev, x)
    n_jobs = settings.N_JOBS if n_jobs is None else n_jobs
    # Threads share ev and its memo tables; see PopulationEvaluator
    entries = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_evaluate_regime)(ev, regime, objective, x_vectors, options) for regime in regimes
    )

    excluded = exclusion_set(entries)
    if all(entry.point for entry in entries):
        best = max(entry.lo for entry in entries)
        argmax = [entry.regime.label for entry in entries if entry.lo >= best - settings.ARGMAX_TOL]
        status = RankingStatus.DECIDED
    elif objective.kind == ObjectiveKind.WEIGHTED_SUM:
        argmax, status = [], RankingStatus.INCONCLUSIVE
    else:
        argmax = [entry.regime.label for entry in entries if entry.regime.label not in excluded]
        if len(argmax) == 1:
            status = RankingStatus.DECIDED
        elif excluded:
            status = RankingStatus.PARTIAL
        else:
            status = RankingStatus.INCONCLUSIVE

    logger.info(
        f"Ranked {len(entries)} regimes (stratum {stratum}): argmax={argmax}, excluded={excluded}, {status.value}"
    )
    return RegimeRanking(stratum, objective, list(entries), argmax, excluded, status)


def rank_strata(
    evaluators: Dict[int, PopulationEvaluator],
    objective: ObjectiveSpec,
    regimes: Optional[Sequence[Regime]] = None,
    options: Optional[RecursionOptions] = None,
    irreversible_d: Optional[bool] = None,
) -> List[RegimeRanking]:
    """Rank each w0 stratum independently."""
    return [
        rank_regimes(ev, objective, regimes, stratum=w0, options=options, irreversible_d=irreversible_d)
        for w0, ev in sorted(evaluators.items())
    ]
