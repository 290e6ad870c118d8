"""
Sample-analog estimation of identified functionals and an individual-level
(cluster) bootstrap.

Estimates plug cell frequencies of an observed panel into the same recursion
that defines the population functional; matching tolerances scale with the
standard errors of the h statistics.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from dyntx.core.config import settings
from dyntx.core.exceptions import (
    AmbiguousMatch,
    DegenerateConditioning,
    DyntxError,
    IrrelevantInstrument,
    NoMatch,
    TooManyFailures,
    UnreachableCell,
)
from dyntx.models.panel import PanelData
from dyntx.models.structural import Regime
from dyntx.services.identify import (
    IdentStatus,
    identify_arsf,
    identify_ate,
    identify_period_ate,
    identify_transition_ate,
)
from dyntx.services.population import CountingEvaluator, PopulationEvaluator, empirical_evaluator
from dyntx.services.recursion import RecursionOptions
from dyntx.services.regimes import ObjectiveSpec, RegimeRanking, rank_regimes

# Configure logging
logger = logging.getLogger(__name__)

REPLICATE_ERRORS = (UnreachableCell, NoMatch, IrrelevantInstrument, AmbiguousMatch, DegenerateConditioning)

MATCHING_NOTE = (
    "matching sets are estimated; bootstrap validity in that case is not established, "
    "intervals are indicative"
)


class FunctionalKind(str, Enum):
    ARSF = "arsf"
    ATE = "ate"
    TRANSITION_ATE = "transition_ate"
    PERIOD_ATE = "period_ate"
    RANKING = "ranking"


@dataclass(frozen=True)
class FunctionalSpec:
    kind: FunctionalKind
    regime: Optional[Regime] = None
    regime_b: Optional[Regime] = None
    x: Optional[Tuple[Optional[int], ...]] = None
    y_minus: Dict[int, int] = field(default_factory=dict)
    y_prev: int = 0
    horizon: Optional[int] = None
    mixture: str = "conditional"
    objective: Optional[ObjectiveSpec] = None

    @property
    def id(self) -> str:
        parts = [self.kind.value]
        if self.regime is not None:
            parts.append(self.regime.label)
        if self.regime_b is not None:
            parts.append(f"vs {self.regime_b.label}")
        if self.y_minus:
            parts.append("y-=" + ",".join(f"{t}:{v}" for t, v in sorted(self.y_minus.items())))
        if self.kind == FunctionalKind.PERIOD_ATE:
            parts.append(f"y_prev={self.y_prev}")
        if self.x is not None:
            parts.append("x=" + ",".join("*" if v is None else str(v) for v in self.x))
        return " ".join(parts)

    @property
    def value_range(self) -> Tuple[float, float]:
        if self.kind == FunctionalKind.ARSF:
            return 0.0, 1.0
        return -1.0, 1.0

    def check(self) -> None:
        needs_regime = self.kind in (FunctionalKind.ARSF, FunctionalKind.ATE, FunctionalKind.TRANSITION_ATE)
        if needs_regime and self.regime is None:
            raise ValueError(f"functional '{self.kind.value}' needs a regime")
        if self.kind in (FunctionalKind.ATE, FunctionalKind.TRANSITION_ATE) and self.regime_b is None:
            raise ValueError(f"functional '{self.kind.value}' needs a second regime")
        if self.kind != FunctionalKind.RANKING and self.x is None:
            raise ValueError(f"functional '{self.kind.value}' needs x")
        if self.kind == FunctionalKind.RANKING and self.objective is None:
            raise ValueError("ranking functional needs an objective")


@dataclass
class BootstrapResult:
    functional: str
    estimate: float
    replicates: int
    interval: Tuple[float, float]
    level: float
    failures: int
    values: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    metadata: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            "functional": self.functional,
            "estimate": self.estimate,
            "ci": list(self.interval),
            "level": self.level,
            "B": self.replicates,
            "failures": self.failures,
            "metadata": self.metadata,
        }


def evaluate_functional(
    ev: PopulationEvaluator, spec: FunctionalSpec, options: Optional[RecursionOptions] = None
) -> Union[float, RegimeRanking]:
    """
    Evaluate a functional on any evaluator; scalar kinds must be point-identified.
    """
    spec.check()
    if spec.kind == FunctionalKind.RANKING:
        return rank_regimes(ev, spec.objective, x=spec.x, options=options)
    if spec.kind == FunctionalKind.ARSF:
        result = identify_arsf(ev, spec.regime, spec.x, options, horizon=spec.horizon)
        if result.status != IdentStatus.POINT:
            raise DyntxError(f"{spec.id} is not point-identified ({result.status.value})")
        return result.value
    if spec.kind == FunctionalKind.ATE:
        effect = identify_ate(ev, spec.regime, spec.regime_b, spec.x, options, horizon=spec.horizon)
    elif spec.kind == FunctionalKind.TRANSITION_ATE:
        effect = identify_transition_ate(ev, spec.regime, spec.regime_b, spec.y_minus, spec.x, options=options)
    else:
        effect = identify_period_ate(ev, spec.y_prev, spec.x, spec.mixture, options)
    if effect.status != IdentStatus.POINT:
        raise DyntxError(f"{spec.id} is not point-identified ({effect.status.value})")
    return effect.value


def estimate(
    data: PanelData,
    spec: FunctionalSpec,
    options: Optional[RecursionOptions] = None,
    min_cell_count: Optional[int] = None,
    grid_sizes: Optional[Sequence[int]] = None,
) -> Union[float, RegimeRanking]:
    """
    Plug-in estimate of a functional from a panel.

    Args:
        data: Observed panel
        spec: Functional to estimate
        options: Recursion options
        min_cell_count: Conditioning floor (default settings.EMPIRICAL_CELL_FLOOR)
        grid_sizes: Grid sizes per period (default: inferred from the panel)

    Returns:
        Point estimate, or a RegimeRanking for the ranking functional
    """
    ev = empirical_evaluator(data, min_cell_count, grid_sizes)
    value = evaluate_functional(ev, spec, options)
    if isinstance(value, float):
        logger.info(f"Estimated {spec.id} = {value:.6f} from n={data.n}")
    return value


def draw_multiplicity(n: int, seed_seq: np.random.SeedSequence) -> np.ndarray:
    """How often each individual appears in one resample of n individuals."""
    rng = np.random.default_rng(seed_seq)
    return np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float)


def _replicate(
    base: CountingEvaluator, spec: FunctionalSpec, options: Optional[RecursionOptions], seed_seq: np.random.SeedSequence
) -> Optional[float]:
    ev = base.reweighted(draw_multiplicity(base.n, seed_seq))
    try:
        return evaluate_functional(ev, spec, options)
    except REPLICATE_ERRORS as exc:
        logger.debug(f"Bootstrap replicate failed: {exc}")
        return None


def bootstrap(
    data: PanelData,
    spec: FunctionalSpec,
    B: int = 500,
    seed: Optional[int] = None,
    alpha: float = 0.05,
    options: Optional[RecursionOptions] = None,
    min_cell_count: Optional[int] = None,
    grid_sizes: Optional[Sequence[int]] = None,
    n_jobs: Optional[int] = None,
    progress: bool = False,
) -> BootstrapResult:
    """
    Percentile interval from resampling individuals (whole T-paths) with replacement.

    Args:
        data: Observed panel
        spec: Scalar functional
        B: Number of replicates (at least settings.BOOTSTRAP_MIN_REPLICATES)
        seed: Seed; each replicate draws from its own spawned SeedSequence
        alpha: One minus the interval level
        options: Recursion options
        min_cell_count: Conditioning floor
        grid_sizes: Grid sizes per period
        n_jobs: Parallel jobs over replicates
        progress: Show a progress bar

    Returns:
        BootstrapResult

    Raises:
        TooManyFailures: when more than settings.BOOTSTRAP_MAX_FAILURE_RATE of the replicates fail
    """
    if B < settings.BOOTSTRAP_MIN_REPLICATES:
        raise ValueError(f"bootstrap needs B >= {settings.BOOTSTRAP_MIN_REPLICATES}, got {B}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if spec.kind == FunctionalKind.RANKING:
        raise ValueError("bootstrap supports scalar functionals only")
    seed = settings.DEFAULT_SEED if seed is None else int(seed)
    n_jobs = settings.N_JOBS if n_jobs is None else n_jobs

    base = empirical_evaluator(data, min_cell_count, grid_sizes)
    point = evaluate_functional(base, spec, options)
    children = np.random.SeedSequence(seed).spawn(B)
    draws = Parallel(n_jobs=n_jobs)(
        delayed(_replicate)(base, spec, options, child)
        for child in tqdm(children, desc="bootstrap", disable=not progress)
    )

    values = np.array([v for v in draws if v is not None], dtype=float)
    failures = B - len(values)
    if failures > settings.BOOTSTRAP_MAX_FAILURE_RATE * B:
        raise TooManyFailures(failures, B)
    if failures:
        logger.warning(f"{failures} of {B} bootstrap replicates failed and were left out")

    low, high = spec.value_range
    lo, hi = np.quantile(values, [alpha / 2.0, 1.0 - alpha / 2.0])
    interval = (float(np.clip(lo, low, high)), float(np.clip(hi, low, high)))
    logger.info(f"Bootstrap {spec.id}: {point:.6f}, {100 * (1 - alpha):.0f}% interval {interval}")
    return BootstrapResult(
        functional=spec.id,
        estimate=point,
        replicates=B,
        interval=interval,
        level=1.0 - alpha,
        failures=failures,
        values=values,
        metadata={"seed": seed, "n": data.n, "matching_note": MATCHING_NOTE},
    )
