"""
Branch / substitute / recurse engine behind every identified functional.

A node at period t (0-based ``s`` here) stands for

    F(t, r, chi, y^{t-1}) = E[payoff(Y(r)) | chi, z, y^{t-1}, D^{t-1} = r^{t-1}]

and is evaluated as

    Pr[D_t = r_t | .] * consistent(r, chi) + Pr[D_t = r_t' | .] * consistent(r', chi')

where r' flips r_t and chi' swaps chi_t for a grid point whose outcome index
under r_t' equals the index of chi_t under r_t. ``consistent`` expands over
y_t with observed transition probabilities and recurses. All probabilities
condition on the full instrument vector z and the full (possibly substituted)
exogenous vector chi; by sequential exogeneity this is the same as
conditioning on prefixes, and it keeps every product of conditionals inside
one cell of the data.

In interval mode a node whose match does not exist is bounded by one-sided
substitutions: a partner with a known positive index gap gives a lower bound,
a known negative gap an upper bound, and a missing side falls back to 0 or 1.
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from dyntx.core.config import settings
from dyntx.core.exceptions import AmbiguousMatch, NoMatch
from dyntx.models.structural import Regime, bits_to_string
from dyntx.services.matching import MatchStatus, Sign, match_lambda, scan_candidates
from dyntx.services.population import Cell, PopulationEvaluator

# Configure logging
logger = logging.getLogger(__name__)

Interval = Tuple[float, float]
XVector = Tuple[Optional[int], ...]


@dataclass
class RecursionOptions:
    fallback_bounds: bool = False
    tol_h: Optional[float] = None
    relevance_tol: Optional[float] = None
    trace: bool = True
    absorbing_y: Optional[bool] = None  # default: the evaluator's irreversible_y
    check_spread: Optional[bool] = None  # default: exact backend only
    monotone_transitions: bool = True
    raise_on_failure: bool = True


@dataclass(frozen=True)
class Target:
    """
    Payoff of a potential outcome path: Y_H when ``terminal`` is set, else 1,
    times the indicator that Y_s equals ``required[s]`` (0-based periods).
    """

    terminal: bool = True
    required: Tuple[Tuple[int, int], ...] = ()

    def requirement(self, s: int) -> Optional[int]:
        for period, value in self.required:
            if period == s:
                return value
        return None


@dataclass
class TraceNode:
    t: int
    y_history: str
    regime: str
    x: XVector
    z: str
    active: bool
    weight_consistent: float = 1.0
    weight_flipped: float = 0.0
    substituted: bool = False
    matched_x: Optional[int] = None
    match_residual: Optional[float] = None
    match_spread: Optional[float] = None
    bounded: bool = False
    lo: float = 0.0
    hi: float = 0.0
    cell: Dict[str, object] = field(default_factory=dict)
    children: List["TraceNode"] = field(default_factory=list)

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()

    def to_dict(self) -> Dict[str, object]:
        return {
            "t": self.t,
            "y_history": self.y_history,
            "regime": self.regime,
            "x": list(self.x),
            "z": self.z,
            "active": self.active,
            "weights": [self.weight_consistent, self.weight_flipped],
            "substituted": self.substituted,
            "matched_x": self.matched_x,
            "match_residual": self.match_residual,
            "match_spread": self.match_spread,
            "bounded": self.bounded,
            "value": [self.lo, self.hi],
            "cell": self.cell,
            "children": [child.to_dict() for child in self.children],
        }


@dataclass(frozen=True)
class LedgerEntry:
    t: int
    y_history: str
    regime: str
    x: XVector
    arm: int
    side: str
    x_tilde: Optional[int]
    sign: Optional[Sign]
    residual: Optional[float]
    cell: Cell

    def to_dict(self) -> Dict[str, object]:
        return {
            "t": self.t,
            "y_history": self.y_history,
            "regime": self.regime,
            "x": list(self.x),
            "arm": self.arm,
            "side": self.side,
            "x_tilde": self.x_tilde,
            "sign": None if self.sign is None else self.sign.name.lower(),
            "residual": self.residual,
        }


class BranchRecursion:
    def __init__(
        self,
        ev: PopulationEvaluator,
        regime: Regime,
        horizon: int,
        target: Target = Target(),
        options: Optional[RecursionOptions] = None,
        interval_mode: bool = False,
    ):
        self.ev = ev
        self.H = horizon
        self.regime = regime.truncate(horizon)
        self.active = self.regime.active
        self.target = target
        self.options = options or RecursionOptions()
        self.interval_mode = interval_mode
        self.check_spread = ev.is_exact if self.options.check_spread is None else self.options.check_spread
        self.absorbing_y = (
            getattr(ev, "irreversible_y", False) if self.options.absorbing_y is None else self.options.absorbing_y
        )
        self.ledger: List[LedgerEntry] = []
        self._memo: Dict[tuple, Tuple[float, float, TraceNode]] = {}

    # Cells

    def _pad(self, pattern: tuple) -> tuple:
        return tuple(pattern) + (None,) * (self.H - len(pattern))

    def _d_pattern(self, r: tuple, length: int) -> tuple:
        return tuple(r[j] if self.active[j] else None for j in range(length))

    def _cell(self, z: tuple, chi: XVector, ys: tuple, ds: tuple) -> Cell:
        return Cell(z, chi, self._pad(ys), self._pad(ds))

    def history_cell(self, s: int, r: tuple, chi: XVector, ys: tuple, z: tuple) -> Cell:
        """Prefix cell (z^{t-1}, x^{t-1}, d^{t-1}, y^{t-1}) used for matching."""
        return Cell(z[:s], chi[:s], ys, self._d_pattern(r, s))

    # Evaluation

    def evaluate(self, x: XVector) -> Tuple[float, float, List[TraceNode], List[Tuple[str, float]]]:
        """
        Average the root node over instrument vectors with weights Pr[Z = z | x].
        """
        chi = tuple(x[: self.H])
        lo = hi = 0.0
        roots, aggregation = [], []
        for z in itertools.product((0, 1), repeat=self.H):
            weight = self.ev.instrument_law(z, chi)
            if weight <= 0.0:
                continue
            node_lo, node_hi, root = self.node(0, self.regime.d, chi, (), z)
            lo += weight * node_lo
            hi += weight * node_hi
            roots.append(root)
            aggregation.append((bits_to_string(z), weight))
        return _clip(lo), _clip(hi), roots, aggregation

    def node(self, s: int, r: tuple, chi: XVector, ys: tuple, z: tuple) -> Tuple[float, float, TraceNode]:
        key = (s, r, chi, ys, z)
        cached = self._memo.get(key)
        if cached is not None:
            return cached

        trace = TraceNode(
            t=s + 1,
            y_history=bits_to_string(ys),
            regime="".join(str(b) if on else "*" for b, on in zip(r, self.active)),
            x=chi,
            z=bits_to_string(z),
            active=bool(self.active[s]),
        )
        if self.absorbing_y and ys and ys[-1] == 1:
            lo = hi = self._absorbed_payoff(s)
            trace.weight_consistent, trace.weight_flipped = 1.0, 0.0
        elif not self.active[s]:
            lo, hi = self._expand(s, r, chi, ys, z, trace)
        else:
            lo, hi = self._branch(s, r, chi, ys, z, trace)
        trace.lo, trace.hi = lo, hi
        result = (lo, hi, trace)
        self._memo[key] = result
        return result

    def _branch(self, s: int, r: tuple, chi: XVector, ys: tuple, z: tuple, trace: TraceNode) -> Interval:
        given = self._cell(z, chi, ys, self._d_pattern(r, s))
        trace.cell = given.describe()
        arm = r[s]
        d_same = self._cell(z, chi, ys, self._d_pattern(r, s) + (arm,))
        d_flip = self._cell(z, chi, ys, self._d_pattern(r, s) + (1 - arm,))
        p_same = self.ev.conditional(d_same, given).estimate
        p_flip = self.ev.conditional(d_flip, given).estimate
        trace.weight_consistent, trace.weight_flipped = p_same, p_flip

        lo = hi = 0.0
        if p_same > 0.0:
            c_lo, c_hi = self._expand(s, r, chi, ys, z, trace)
            lo += p_same * c_lo
            hi += p_same * c_hi
        if p_flip > 0.0:
            f_lo, f_hi = self._flipped(s, r, chi, ys, z, trace)
            lo += p_flip * f_lo
            hi += p_flip * f_hi
        return lo, hi

    def _flipped(self, s: int, r: tuple, chi: XVector, ys: tuple, z: tuple, trace: TraceNode) -> Interval:
        history = self.history_cell(s, r, chi, ys, z)
        arm = r[s]
        options = self.options
        matches = match_lambda(self.ev, history, arm, chi[s], options.tol_h, options.relevance_tol)
        flipped = r[:s] + (1 - arm,) + r[s + 1:]

        if matches.status == MatchStatus.MATCHED:
            values = []
            for x_tilde, _ in matches.matches:
                chi_tilde = chi[:s] + (x_tilde,) + chi[s + 1:]
                values.append(self._expand(s, flipped, chi_tilde, ys, z, trace))
            spread = max(v[1] for v in values) - min(v[0] for v in values)
            trace.substituted = True
            trace.matched_x = matches.best
            trace.match_residual = matches.matches[0][1]
            trace.match_spread = spread
            limit = settings.MATCH_SPREAD_FACTOR * matches.tolerance
            if len(values) > 1 and spread > limit:
                message = (
                    f"matches {[m[0] for m in matches.matches]} at t={s + 1} disagree by {spread:.3g} "
                    f"(limit {limit:.3g})"
                )
                if self.check_spread:
                    raise AmbiguousMatch(message)
                logger.warning(message)
            return values[0]

        if not self.interval_mode:
            raise NoMatch(s + 1, arm, chi[s], history.describe())
        return self._bounded(s, r, flipped, chi, ys, z, history, trace)

    def _bounded(
        self, s: int, r: tuple, flipped: tuple, chi: XVector, ys: tuple, z: tuple, history: Cell, trace: TraceNode
    ) -> Interval:
        arm = r[s]
        trace.bounded = True
        options = self.options
        common = dict(t=s + 1, y_history=trace.y_history, regime=trace.regime, x=chi, arm=arm, cell=history)

        if not options.monotone_transitions and s + 1 < self.H:
            for side in ("lower", "upper"):
                self.ledger.append(LedgerEntry(side=side, x_tilde=None, sign=None, residual=None, **common))
            return 0.0, 1.0

        candidates = scan_candidates(self.ev, history, arm, chi[s], options.tol_h, options.relevance_tol)
        positives = [c for c in candidates if c.sign == Sign.POSITIVE]
        negatives = [c for c in candidates if c.sign == Sign.NEGATIVE]

        lo, hi = 0.0, 1.0
        lower = min(positives, key=lambda c: (c.residual, c.x_tilde), default=None)
        if lower is not None:
            chi_tilde = chi[:s] + (lower.x_tilde,) + chi[s + 1:]
            lo = self._expand(s, flipped, chi_tilde, ys, z, trace)[0]
        self.ledger.append(
            LedgerEntry(
                side="lower",
                x_tilde=None if lower is None else lower.x_tilde,
                sign=None if lower is None else lower.sign,
                residual=None if lower is None else lower.residual,
                **common,
            )
        )

        upper = min(negatives, key=lambda c: (c.residual, c.x_tilde), default=None)
        if upper is not None:
            chi_tilde = chi[:s] + (upper.x_tilde,) + chi[s + 1:]
            hi = self._expand(s, flipped, chi_tilde, ys, z, trace)[1]
        self.ledger.append(
            LedgerEntry(
                side="upper",
                x_tilde=None if upper is None else upper.x_tilde,
                sign=None if upper is None else upper.sign,
                residual=None if upper is None else upper.residual,
                **common,
            )
        )
        logger.debug(f"Bounded node t={s + 1}, y={trace.y_history}, regime {trace.regime}: [{lo:.6f}, {hi:.6f}]")
        return lo, max(lo, hi)

    def _absorbed_payoff(self, s: int) -> float:
        """Payoff once Y has reached its absorbing state: every later outcome is 1."""
        if any(value == 0 for period, value in self.target.required if period >= s):
            return 0.0
        return 1.0

    def _expand(self, s: int, r: tuple, chi: XVector, ys: tuple, z: tuple, trace: TraceNode) -> Interval:
        """Consistent branch: average over y_t, then recurse or pay off at the horizon."""
        ds = self._d_pattern(r, s + 1)
        given = self._cell(z, chi, ys, ds)
        required = self.target.requirement(s)
        lo = hi = 0.0
        for y in (0, 1):
            if required is not None and required != y:
                continue
            p = self.ev.conditional(self._cell(z, chi, ys + (y,), ds), given).estimate
            if p <= 0.0:
                continue
            if s + 1 == self.H:
                payoff = float(y) if self.target.terminal else 1.0
                lo += p * payoff
                hi += p * payoff
            else:
                child_lo, child_hi, child = self.node(s + 1, r, chi, ys + (y,), z)
                if self.options.trace:
                    trace.children.append(child)
                lo += p * child_lo
                hi += p * child_hi
        return lo, hi


def _clip(value: float) -> float:
    return min(max(value, 0.0), 1.0)
