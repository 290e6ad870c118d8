"""
Identified functionals of potential outcomes: ARSFs, ATEs, joint
probabilities, transition and period-specific effects.

All of them run the branch / substitute / recurse engine in
``dyntx.services.recursion`` over a PopulationEvaluator, so the same code
produces population values (exact backend), Monte Carlo approximations and
sample-analog estimates.
"""
import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from dyntx.core.config import settings
from dyntx.core.exceptions import (
    AmbiguousMatch,
    DegenerateConditioning,
    IrrelevantInstrument,
    ModelValidationError,
    NoMatch,
    RegimeError,
)
from dyntx.models.structural import Regime, Violation, bits_to_string, free_treatment_dependence
from dyntx.services.matching import MatchStatus, match_lambda
from dyntx.services.population import Cell, PopulationEvaluator
from dyntx.services.recursion import (
    BranchRecursion,
    LedgerEntry,
    RecursionOptions,
    Target,
    TraceNode,
    XVector,
)

# Configure logging
logger = logging.getLogger(__name__)


class IdentStatus(str, Enum):
    POINT = "Point"
    BOUNDS = "Bounds"
    FAILED = "Failed"


@dataclass
class ArsfResult:
    regime: Regime
    x: XVector
    horizon: int
    status: IdentStatus
    lo: Optional[float]
    hi: Optional[float]
    trace: List[TraceNode] = field(default_factory=list)
    aggregation: List[Tuple[str, float]] = field(default_factory=list)
    ledger: List[LedgerEntry] = field(default_factory=list)
    message: Optional[str] = None
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def value(self) -> Optional[float]:
        """Point value; None unless the status is Point."""
        return self.lo if self.status == IdentStatus.POINT else None

    @property
    def interval(self) -> Optional[Tuple[float, float]]:
        if self.lo is None:
            return None
        return self.lo, self.hi

    def nodes(self):
        for root in self.trace:
            yield from root.walk()

    def to_dict(self, include_trace: bool = False) -> Dict[str, object]:
        payload = {
            "regime": self.regime.label,
            "x": list(self.x),
            "horizon": self.horizon,
            "status": self.status.value,
            "aggregation": [{"z": z, "weight": w} for z, w in self.aggregation],
            "evaluator": self.metadata,
        }
        if self.status == IdentStatus.POINT:
            payload["value"] = self.lo
        elif self.status == IdentStatus.BOUNDS:
            payload["interval"] = [self.lo, self.hi]
            payload["ledger"] = [entry.to_dict() for entry in self.ledger]
        else:
            payload["message"] = self.message
        if include_trace:
            payload["trace"] = [root.to_dict() for root in self.trace]
        return payload


@dataclass(frozen=True)
class EffectResult:
    """Difference of two identified quantities, a point or an interval."""

    lo: float
    hi: float
    status: IdentStatus
    components: Dict[str, object] = field(default_factory=dict)

    @property
    def value(self) -> Optional[float]:
        return self.lo if self.status == IdentStatus.POINT else None

    def to_dict(self) -> Dict[str, object]:
        payload = {"status": self.status.value, **self.components}
        if self.status == IdentStatus.POINT:
            payload["value"] = self.lo
        else:
            payload["interval"] = [self.lo, self.hi]
        return payload


def _prepare(
    ev: PopulationEvaluator, regime: Regime, x: Sequence[Optional[int]], horizon: Optional[int] = None
) -> Tuple[Regime, XVector, int]:
    """
    Check a (regime, x) query against the evaluator and return it with the horizon.
    """
    T = ev.horizon
    if regime.T != T:
        raise RegimeError(f"regime length mismatch: regime {regime.label} has {regime.T} periods, horizon is {T}")
    model = getattr(ev, "model", None)
    if model is not None:
        model.check_regime(regime)
    x = tuple(None if v is None else int(v) for v in x)
    if len(x) != T:
        raise RegimeError(f"x has {len(x)} entries, horizon is {T}")
    for s, value in enumerate(x):
        if value is not None and not 0 <= value < ev.grid_sizes[s]:
            raise RegimeError(f"x[{s + 1}] = {value} lies outside the grid of size {ev.grid_sizes[s]}")
        if value is None and regime.is_active(s):
            raise RegimeError(f"x must be given at treated period t={s + 1}")
    H = T if horizon is None else int(horizon)
    if not 1 <= H <= T:
        raise RegimeError(f"horizon {H} outside 1..{T}")
    if model is not None and regime.is_masked:
        periods = free_treatment_dependence(model, regime, H)
        if periods:
            raise ModelValidationError(
                [
                    Violation(
                        "masked_free_treatment",
                        f"outcome index at t={periods} depends on a treatment regime {regime.label} leaves to selection",
                    )
                ]
            )
    return regime, x, H


def _z_vectors(ev: PopulationEvaluator, x: XVector, z: Optional[Sequence[int]]) -> List[Tuple[Tuple[int, ...], float]]:
    if z is not None:
        return [(tuple(int(b) for b in z[: len(x)]), 1.0)]
    return [
        (zs, weight)
        for zs in itertools.product((0, 1), repeat=len(x))
        if (weight := ev.instrument_law(zs, x)) > 0.0
    ]


def identify_arsf(
    ev: PopulationEvaluator,
    regime: Regime,
    x: Sequence[Optional[int]],
    options: Optional[RecursionOptions] = None,
    horizon: Optional[int] = None,
    z: Optional[Sequence[int]] = None,
) -> ArsfResult:
    """
    Identify E[Y_H(d) | x] by the branch / substitute / recurse induction.

    Args:
        ev: Population evaluator
        regime: Treatment regime (masked entries follow selection)
        x: Grid-index vector; None is allowed at untreated periods of a masked regime
        options: Recursion options (tolerances, bounds fallback, trace)
        horizon: Identify the period-H ARSF E[Y_H(d^H) | x^H] instead of the terminal one
        z: Condition on this instrument vector instead of averaging over Pr[Z = z | x]

    Returns:
        ArsfResult with status Point, Bounds (fallback) or Failed

    Raises:
        NoMatch, IrrelevantInstrument, AmbiguousMatch: when the point recursion fails
            and neither the bounds fallback nor ``raise_on_failure=False`` is set
        UnreachableCell: when a needed cell is empty or below the count floor
    """
    options = options or RecursionOptions()
    regime, x, H = _prepare(ev, regime, x, horizon)
    chi = x[:H]
    engine = BranchRecursion(ev, regime, H, Target(), options)
    try:
        lo, hi, roots, aggregation = _run(engine, ev, chi, z)
    except (NoMatch, IrrelevantInstrument, AmbiguousMatch) as exc:
        if options.fallback_bounds and isinstance(exc, NoMatch):
            from dyntx.services.bounds import bound_arsf

            logger.warning(f"Point identification failed for regime {regime.label} at x={x}: {exc}; bounding")
            bounds = bound_arsf(ev, regime, x, options, horizon=H, z=z)
            return ArsfResult(
                regime=regime,
                x=x,
                horizon=H,
                status=IdentStatus.BOUNDS,
                lo=bounds.lo,
                hi=bounds.hi,
                trace=bounds.trace,
                aggregation=bounds.aggregation,
                ledger=bounds.ledger,
                message=str(exc),
                metadata=ev.metadata(),
            )
        if options.raise_on_failure:
            raise
        logger.warning(f"Identification failed for regime {regime.label} at x={x}: {exc}")
        return ArsfResult(regime, x, H, IdentStatus.FAILED, None, None, message=str(exc), metadata=ev.metadata())

    logger.info(f"Identified E[Y_{H}({regime.label}) | x={chi}] = {lo:.6f}")
    return ArsfResult(
        regime=regime,
        x=x,
        horizon=H,
        status=IdentStatus.POINT,
        lo=lo,
        hi=hi,
        trace=roots if options.trace else [],
        aggregation=aggregation,
        metadata=ev.metadata(),
    )


def _run(engine: BranchRecursion, ev: PopulationEvaluator, chi: XVector, z: Optional[Sequence[int]]):
    if z is None:
        return engine.evaluate(chi)
    z = tuple(int(b) for b in z[: engine.H])
    lo, hi, root = engine.node(0, engine.regime.d, chi, (), z)
    return lo, hi, [root], [(bits_to_string(z), 1.0)]


def identify_arsf_subsequence(
    ev: PopulationEvaluator,
    regime: Regime,
    x_minus: Sequence[Optional[int]],
    options: Optional[RecursionOptions] = None,
) -> ArsfResult:
    """
    ARSF of a subsequence of treatments, E[Y_T(d_-) | x_-].

    Args:
        ev: Population evaluator
        regime: Masked regime; active periods are the treatment periods
        x_minus: Exogenous values at the treatment periods, either one per active
            period or a full-length vector with None elsewhere
        options: Recursion options

    Returns:
        ArsfResult; untreated periods only run the outcome expansion
    """
    active_periods = [s for s in range(regime.T) if regime.is_active(s)]
    x_minus = list(x_minus)
    if len(x_minus) == len(active_periods) and len(x_minus) != regime.T:
        x = [None] * regime.T
        for s, value in zip(active_periods, x_minus):
            x[s] = value
    else:
        x = x_minus
    return identify_arsf(ev, regime, x, options)


def identify_ate(
    ev: PopulationEvaluator,
    regime_a: Regime,
    regime_b: Regime,
    x: Sequence[Optional[int]],
    options: Optional[RecursionOptions] = None,
    horizon: Optional[int] = None,
) -> EffectResult:
    """
    E[Y_T(d_a) | x] - E[Y_T(d_b) | x]; interval arithmetic when either side is bounded.
    """
    a = identify_arsf(ev, regime_a, x, options, horizon)
    b = identify_arsf(ev, regime_b, x, options, horizon)
    components = {"regime_a": regime_a.label, "regime_b": regime_b.label, "x": list(a.x)}
    if IdentStatus.FAILED in (a.status, b.status):
        raise RegimeError(f"ATE of {regime_a.label} vs {regime_b.label} failed: {a.message or b.message}")
    if a.status == IdentStatus.POINT and b.status == IdentStatus.POINT:
        if regime_a == regime_b:
            return EffectResult(0.0, 0.0, IdentStatus.POINT, components)
        value = a.lo - b.lo
        return EffectResult(value, value, IdentStatus.POINT, components)
    return EffectResult(
        max(a.lo - b.hi, -1.0), min(a.hi - b.lo, 1.0), IdentStatus.BOUNDS, {**components, "a": [a.lo, a.hi], "b": [b.lo, b.hi]}
    )


def identify_joint_prob(
    ev: PopulationEvaluator,
    regime: Regime,
    target: Dict[int, int],
    x: Sequence[Optional[int]],
    include_terminal: bool = True,
    options: Optional[RecursionOptions] = None,
    z: Optional[Sequence[int]] = None,
) -> float:
    """
    Pr[Y_T(d) = 1, Y_-(d) = y_- | x] (include_terminal) or Pr[Y_-(d) = y_- | x].

    Args:
        ev: Population evaluator
        regime: Treatment regime
        target: 1-based period -> required outcome for the periods in y_-
        x: Grid-index vector
        include_terminal: Also require Y_T(d) = 1
        options: Recursion options
        z: Condition on this instrument vector instead of averaging

    Returns:
        Identified probability
    """
    T = ev.horizon
    target = {int(period): int(value) for period, value in target.items()}
    if any(not 1 <= period <= T for period in target):
        raise RegimeError(f"target periods must lie in 1..{T}, got {sorted(target)}")
    if include_terminal:
        H = T
    elif target:
        H = max(target)
    else:
        return 1.0
    options = options or RecursionOptions()
    regime, x, H = _prepare(ev, regime, x, H)
    required = tuple(sorted((period - 1, value) for period, value in target.items()))
    engine = BranchRecursion(ev, regime, H, Target(terminal=include_terminal, required=required), options)
    lo, _, _, _ = _run(engine, ev, x[:H], z)
    logger.debug(f"Joint probability for regime {regime.label}, target {target}, terminal={include_terminal}: {lo:.6f}")
    return lo


def identify_transition_ate(
    ev: PopulationEvaluator,
    regime_a: Regime,
    regime_b: Regime,
    y_minus: Dict[int, int],
    x: Sequence[Optional[int]],
    floor: Optional[float] = None,
    options: Optional[RecursionOptions] = None,
) -> EffectResult:
    """
    E[Y_T(d_a) | Y_-(d_a) = y_-, x] - E[Y_T(d_b) | Y_-(d_b) = y_-, x].

    Raises:
        DegenerateConditioning: when either Pr[Y_-(d) = y_- | x] falls below the floor
    """
    floor = settings.TRANSITION_FLOOR if floor is None else floor
    T = ev.horizon
    if any(not 1 <= period < T for period in y_minus):
        raise RegimeError(f"conditioning periods must lie in 1..{T - 1}, got {sorted(y_minus)}")
    ratios, parts = [], {}
    for name, regime in (("a", regime_a), ("b", regime_b)):
        numerator = identify_joint_prob(ev, regime, y_minus, x, True, options)
        denominator = identify_joint_prob(ev, regime, y_minus, x, False, options)
        if denominator < floor:
            raise DegenerateConditioning(
                f"Pr[Y_-({regime.label}) = {y_minus} | x] = {denominator:.3g} is below the floor {floor:.3g}"
            )
        ratios.append(numerator / denominator)
        parts[name] = {"regime": regime.label, "numerator": numerator, "denominator": denominator}
    value = 0.0 if regime_a == regime_b else ratios[0] - ratios[1]
    return EffectResult(value, value, IdentStatus.POINT, {"y_minus": dict(y_minus), **parts})


def identify_period_ate(
    ev: PopulationEvaluator,
    y_prev: int,
    x: Sequence[int],
    mixture: str = "conditional",
    options: Optional[RecursionOptions] = None,
    floor: Optional[float] = None,
) -> EffectResult:
    """
    Effect of the last treatment given the previous outcome,
    E[Y_T(D^{T-1}, 1) | y_{T-1}, x] - E[Y_T(D^{T-1}, 0) | y_{T-1}, x].

    Each term mixes E[Y_T(d^{T-1}, d_T) | Y_{T-1} = y_{T-1}, D^{T-1} = d^{T-1}, x]
    over observed treatment prefixes. The "conditional" mixture weights prefixes by
    Pr[D^{T-1} = d^{T-1} | Y_{T-1} = y_{T-1}, x]; "marginal" uses Pr[D^{T-1} = d^{T-1} | x].

    Args:
        ev: Population evaluator
        y_prev: Outcome y_{T-1} conditioned on
        x: Full grid-index vector
        mixture: "conditional" or "marginal"
        options: Recursion options
        floor: Smallest conditioning probability accepted

    Returns:
        EffectResult with the treated and untreated means as components
    """
    if mixture not in ("conditional", "marginal"):
        raise ValueError(f"unknown mixture '{mixture}'")
    floor = settings.TRANSITION_FLOOR if floor is None else floor
    options = options or RecursionOptions()
    T = ev.horizon
    if T == 1:
        if y_prev != 0:
            raise DegenerateConditioning("Y_0 = 0, so y_prev must be 0 when T = 1")
        effect = identify_ate(ev, Regime((1,)), Regime((0,)), x, options)
        return EffectResult(effect.lo, effect.hi, effect.status, {"y_prev": 0, "mixture": mixture})

    _, x, _ = _prepare(ev, Regime((0,) * T), x)
    zs = _z_vectors(ev, x, None)
    means = {}
    for d_last in (0, 1):
        numerators: Dict[tuple, float] = {}
        denominators: Dict[tuple, float] = {}
        prefix_law: Dict[tuple, float] = {}
        for d_prev in itertools.product((0, 1), repeat=T - 1):
            engine = BranchRecursion(ev, Regime(d_prev + (d_last,)), T, Target(), options)
            numerator = denominator = law = 0.0
            for z, weight in zs:
                law += weight * ev.subvector(z, x, (None,) * T, d_prev + (None,)).estimate
                for y_head in itertools.product((0, 1), repeat=T - 2):
                    ys = y_head + (y_prev,)
                    p = ev.subvector(z, x, ys + (None,), d_prev + (None,)).estimate
                    if p <= 0.0:
                        continue
                    lo, _, _ = engine.node(T - 1, engine.regime.d, x, ys, z)
                    numerator += weight * p * lo
                    denominator += weight * p
            numerators[d_prev], denominators[d_prev], prefix_law[d_prev] = numerator, denominator, law
        means[d_last] = _mix(numerators, denominators, prefix_law, mixture, floor, y_prev)

    value = means[1] - means[0]
    logger.info(f"Period ATE given y_{T - 1}={y_prev}, x={x}: {value:.6f} ({mixture} mixture)")
    return EffectResult(
        value,
        value,
        IdentStatus.POINT,
        {"y_prev": y_prev, "x": list(x), "mixture": mixture, "treated": means[1], "untreated": means[0]},
    )


def _mix(numerators, denominators, prefix_law, mixture: str, floor: float, y_prev: int) -> float:
    if mixture == "conditional":
        total = sum(denominators.values())
        if total < floor:
            raise DegenerateConditioning(f"Pr[Y_(T-1) = {y_prev} | x] = {total:.3g} is below the floor {floor:.3g}")
        return sum(numerators.values()) / total
    value = 0.0
    for d_prev, law in prefix_law.items():
        if law <= 0.0:
            continue
        if denominators[d_prev] < floor:
            raise DegenerateConditioning(
                f"Pr[Y_(T-1) = {y_prev}, D^(T-1) = {bits_to_string(d_prev)} | x] is below the floor {floor:.3g}"
            )
        value += law * numerators[d_prev] / denominators[d_prev]
    return value


def arsf_closed_form_t2(
    ev: PopulationEvaluator,
    regime: Regime,
    x: Sequence[int],
    tol: Optional[float] = None,
    relevance_tol: Optional[float] = None,
) -> float:
    """
    Two-period ARSF written out term by term, without the recursion engine.

    The first-period flipped branch is evaluated at x' = (x_1', x_2) with
    x_1' the first-period match of x_1; second-period flips use the match of
    x_2 in the history cell reached by each branch.
    """
    if ev.horizon != 2:
        raise RegimeError(f"closed form needs T = 2, got T = {ev.horizon}")
    regime, x, _ = _prepare(ev, regime, x)
    if regime.is_masked:
        raise RegimeError("closed form needs an unmasked regime")
    d1, d2 = regime.d
    x1, x2 = x

    def cond(z, xs, ys, ds, ys_given, ds_given) -> float:
        return ev.conditional(Cell(z, xs, ys, ds), Cell(z, xs, ys_given, ds_given)).estimate

    def matched(history: Cell, arm: int, source: int) -> int:
        found = match_lambda(ev, history, arm, source, tol, relevance_tol)
        if found.status != MatchStatus.MATCHED:
            raise NoMatch(history.t + 1, arm, source, history.describe())
        return found.best

    def second_period(z, xs, y1, first) -> float:
        """E[Y_2(first, d2) | z, xs, y1, D_1 = first] with the second-period flip."""
        given = ((y1, None), (first, None))
        stay = cond(z, xs, (y1, None), (first, d2), *given)
        move = cond(z, xs, (y1, None), (first, 1 - d2), *given)
        total = 0.0
        if stay > 0.0:
            total += stay * cond(z, xs, (y1, 1), (first, d2), (y1, None), (first, d2))
        if move > 0.0:
            x2_match = matched(Cell((z[0],), (xs[0],), (y1,), (first,)), d2, x2)
            xs_move = (xs[0], x2_match)
            total += move * cond(z, xs_move, (y1, 1), (first, 1 - d2), (y1, None), (first, 1 - d2))
        return total

    value = 0.0
    for z in itertools.product((0, 1), repeat=2):
        weight = ev.instrument_law(z, x)
        if weight <= 0.0:
            continue
        free = (None, None)
        stay = cond(z, x, free, (d1, None), free, free)
        move = cond(z, x, free, (1 - d1, None), free, free)
        inner = 0.0
        if stay > 0.0:
            for y1 in (0, 1):
                p_y = cond(z, x, (y1, None), (d1, None), free, (d1, None))
                if p_y > 0.0:
                    inner += stay * p_y * second_period(z, x, y1, d1)
        if move > 0.0:
            x_flip = (matched(Cell((), (), (), ()), d1, x1), x2)
            for y1 in (0, 1):
                p_y = cond(z, x_flip, (y1, None), (1 - d1, None), free, (1 - d1, None))
                if p_y > 0.0:
                    inner += move * p_y * second_period(z, x_flip, y1, 1 - d1)
        value += weight * inner
    return min(max(value, 0.0), 1.0)


def g_computation_arsf(ev: PopulationEvaluator, regime: Regime, x: Sequence[int]) -> float:
    """
    ARSF under sequential randomization (no selection on unobservables):

        sum_z Pr[z | x] sum_{y^{T-1}} prod_t Pr[y_t | z, x, y^{t-1}, D^t = d^t] * E[Y_T | z, x, y^{T-1}, D = d]

    Biased when treatments are endogenous; kept as a comparison baseline.
    """
    regime, x, T = _prepare(ev, regime, x)
    d = tuple(regime.d[s] if regime.is_active(s) else None for s in range(T))

    def pad(pattern) -> tuple:
        return tuple(pattern) + (None,) * (T - len(pattern))

    def walk(z, s, ys) -> float:
        given = Cell(z, x, pad(ys), pad(d[: s + 1]))
        p_one = ev.conditional(Cell(z, x, pad(ys + (1,)), pad(d[: s + 1])), given).estimate
        if s + 1 == T:
            return p_one
        total = 0.0
        for y, p in ((0, 1.0 - p_one), (1, p_one)):
            if p > 0.0:
                total += p * walk(z, s + 1, ys + (y,))
        return total

    value = sum(weight * walk(z, 0, ()) for z, weight in _z_vectors(ev, x, None))
    logger.debug(f"g-computation ARSF for regime {regime.label} at x={x}: {value:.6f}")
    return min(max(value, 0.0), 1.0)
