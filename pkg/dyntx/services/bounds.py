"""
Partial identification when index matching fails somewhere in the recursion.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from dyntx.models.structural import Regime
from dyntx.services.identify import _prepare, _run
from dyntx.services.population import PopulationEvaluator
from dyntx.services.recursion import BranchRecursion, LedgerEntry, RecursionOptions, Target, TraceNode, XVector

# Configure logging
logger = logging.getLogger(__name__)


@dataclass
class BoundsResult:
    regime: Regime
    x: XVector
    lo: float
    hi: float
    ledger: List[LedgerEntry] = field(default_factory=list)
    trace: List[TraceNode] = field(default_factory=list)
    aggregation: List[Tuple[str, float]] = field(default_factory=list)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def degenerate(self) -> bool:
        return not self.ledger

    def contains(self, value: float, tol: float = 1e-9) -> bool:
        return self.lo - tol <= value <= self.hi + tol

    def to_dict(self, include_trace: bool = False) -> Dict[str, object]:
        payload = {
            "regime": self.regime.label,
            "x": list(self.x),
            "lo": self.lo,
            "hi": self.hi,
            "ledger": [entry.to_dict() for entry in self.ledger],
        }
        if include_trace:
            payload["trace"] = [root.to_dict() for root in self.trace]
        return payload


def bound_arsf(
    ev: PopulationEvaluator,
    regime: Regime,
    x: Sequence[Optional[int]],
    options: Optional[RecursionOptions] = None,
    horizon: Optional[int] = None,
    z: Optional[Sequence[int]] = None,
) -> BoundsResult:
    """
    Bounds on E[Y_T(d) | x] from one-sided substitutions at unmatched nodes.

    Where a match exists the node is point-identified as in identify_arsf.
    Otherwise every grid point x_tilde (x itself included) with a known sign of
    mu_t(., d_t, x) - mu_t(., d_t', x_tilde) is a candidate: a positive gap means
    the substituted branch bounds the flipped term from below, a negative gap
    from above. The candidate with the smallest h residual is used on each side
    and a side without candidates falls back to 0 or 1.

    Args:
        ev: Population evaluator
        regime: Treatment regime
        x: Grid-index vector
        options: Recursion options; ``monotone_transitions=False`` makes
            non-terminal unmatched nodes trivial
        horizon: Bound the period-H ARSF instead of the terminal one
        z: Condition on this instrument vector instead of averaging

    Returns:
        BoundsResult with the direction ledger

    Raises:
        IrrelevantInstrument: when no sign is computable at a needed node
    """
    options = options or RecursionOptions()
    regime, x, H = _prepare(ev, regime, x, horizon)
    engine = BranchRecursion(ev, regime, H, Target(), options, interval_mode=True)
    lo, hi, roots, aggregation = _run(engine, ev, x[:H], z)
    hi = max(lo, hi)
    logger.info(
        f"Bounds on E[Y_{H}({regime.label}) | x={x[:H]}]: [{lo:.6f}, {hi:.6f}] "
        f"with {len(engine.ledger)} one-sided substitutions"
    )
    return BoundsResult(regime, x, lo, hi, engine.ledger, roots if options.trace else [], aggregation)


def bound_ate(
    ev: PopulationEvaluator,
    regime_a: Regime,
    regime_b: Regime,
    x: Sequence[Optional[int]],
    options: Optional[RecursionOptions] = None,
) -> Tuple[float, float]:
    """Interval [lo_a - hi_b, hi_a - lo_b] clipped to [-1, 1]."""
    a = bound_arsf(ev, regime_a, x, options)
    b = bound_arsf(ev, regime_b, x, options)
    if regime_a == regime_b and a.degenerate:
        return 0.0, 0.0
    return max(a.lo - b.hi, -1.0), min(a.hi - b.lo, 1.0)
