"""
Conditional probabilities of the observed process (Y, D, X, Z).

Every backend answers queries through one primitive, the joint measure of a
cell, i.e. a pattern over the first t periods of (z, x, y, d) in which
``None`` leaves a coordinate free. The exact backend measures cells in
probability, the counting backends in observations, and conditional
probabilities are always ratios of two measures taken on the same backend.
"""
import itertools
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from dyntx.core.config import settings
from dyntx.core.exceptions import UnreachableCell, UnsupportedLatent
from dyntx.models.panel import PanelData
from dyntx.models.structural import LatentMode, StructuralModel, bits_to_string
from dyntx.services.quadrature import LatentQuadrature

# Configure logging
logger = logging.getLogger(__name__)

Pattern = Tuple[Optional[int], ...]


class Backend(str, Enum):
    EXACT = "exact"
    MC = "mc"
    EMPIRICAL = "empirical"


@dataclass(frozen=True)
class CellStats:
    count: Optional[int]
    estimate: float
    std_error: float


def _pattern(values: Sequence[Optional[int]]) -> Pattern:
    return tuple(None if v is None else int(v) for v in values)


@dataclass(frozen=True)
class Cell:
    """
    Event on the first t periods: Z^t = z, X^t = x, Y^t = y, D^t = d, entries set to None are free.
    """

    z: Pattern = ()
    x: Pattern = ()
    y: Pattern = ()
    d: Pattern = ()

    def __post_init__(self):
        lengths = {len(self.z), len(self.x), len(self.y), len(self.d)}
        if len(lengths) != 1:
            raise ValueError(f"cell patterns differ in length: {self}")
        for name in ("z", "x", "y", "d"):
            object.__setattr__(self, name, _pattern(getattr(self, name)))

    @classmethod
    def history(cls, z=(), x=(), y=(), d=()) -> "Cell":
        return cls(tuple(z), tuple(x), tuple(y), tuple(d))

    @property
    def t(self) -> int:
        return len(self.z)

    def extend(self, z=None, x=None, y=None, d=None) -> "Cell":
        return Cell(self.z + (z,), self.x + (x,), self.y + (y,), self.d + (d,))

    def replace_last(self, z="keep", x="keep", y="keep", d="keep") -> "Cell":
        def swap(pattern, value):
            return pattern if value == "keep" else pattern[:-1] + (value,)

        return Cell(swap(self.z, z), swap(self.x, x), swap(self.y, y), swap(self.d, d))

    def prefix(self, t: int) -> "Cell":
        return Cell(self.z[:t], self.x[:t], self.y[:t], self.d[:t])

    def describe(self) -> Dict[str, object]:
        return {
            "t": self.t,
            "z": bits_to_string(self.z),
            "x": list(self.x),
            "y": bits_to_string(self.y),
            "d": bits_to_string(self.d),
        }


class PopulationEvaluator(ABC):
    """
    Cell measures and conditionals behind every identified functional.

    Memo tables only gain entries, each computed in full before it is stored and
    equal for every writer, so threads may share one evaluator.
    """

    backend: Backend
    irreversible_y: bool = False

    def __init__(self, horizon: int, grid_sizes: Sequence[int]):
        self.horizon = horizon
        self.grid_sizes = tuple(int(k) for k in grid_sizes)
        self._cache: Dict[Cell, float] = {}

    @property
    def is_exact(self) -> bool:
        return self.backend == Backend.EXACT

    @abstractmethod
    def _measure(self, cell: Cell) -> float:
        """Joint measure of the cell (probability or observation count)."""

    @abstractmethod
    def _floor(self) -> float:
        """Smallest conditioning measure accepted."""

    def measure(self, cell: Cell) -> float:
        if cell.t > self.horizon:
            raise ValueError(f"cell spans {cell.t} periods, horizon is {self.horizon}")
        value = self._cache.get(cell)
        if value is None:
            value = self._measure(cell)
            self._cache[cell] = value
        return value

    def reachable(self, cell: Cell) -> bool:
        return self.measure(cell) >= self._floor()

    def conditional(self, event: Cell, given: Cell) -> CellStats:
        """
        Pr[event | given], where event refines given.
        """
        denominator = self.measure(given)
        if denominator < self._floor() or denominator <= 0.0:
            raise UnreachableCell(given.describe(), count=denominator, floor=self._floor())
        estimate = min(max(self.measure(event) / denominator, 0.0), 1.0)
        if self.is_exact:
            return CellStats(count=None, estimate=estimate, std_error=0.0)
        count = int(round(denominator))
        return CellStats(count=count, estimate=estimate, std_error=math.sqrt(estimate * (1.0 - estimate) / count))

    # Query surface

    def joint(self, history: Cell, z_t: int, x_t: Optional[int], y: int, d: int) -> CellStats:
        """Pr[Y_t = y, D_t = d | z^t, x^t, d^{t-1}, y^{t-1}]."""
        given = history.extend(z=z_t, x=x_t)
        return self.conditional(history.extend(z=z_t, x=x_t, y=y, d=d), given)

    def propensity(self, history: Cell, z_t: int, d: int, x_t: Optional[int] = None) -> CellStats:
        """Pr[D_t = d | z^t, x^{t-1 or t}, d^{t-1}, y^{t-1}]."""
        given = history.extend(z=z_t, x=x_t)
        return self.conditional(history.extend(z=z_t, x=x_t, d=d), given)

    def transition(self, history: Cell, z_t: Optional[int], x_t: Optional[int], d: Optional[int], y: int) -> CellStats:
        """Pr[Y_t = y | z^t, x^t, d^t, y^{t-1}]."""
        given = history.extend(z=z_t, x=x_t, d=d)
        return self.conditional(history.extend(z=z_t, x=x_t, y=y, d=d), given)

    def terminal_mean(self, history: Cell, z_t: int, x_t: int, d: int) -> CellStats:
        """E[Y_T | z, x, d^T, y^{T-1}]."""
        return self.transition(history, z_t, x_t, d, 1)

    def instrument_law(self, z: Sequence[int], x: Sequence[Optional[int]]) -> float:
        """Pr[Z = z | X = x] over the periods covered by z."""
        t = len(z)
        free = (None,) * t
        given = Cell(free, tuple(x), free, free)
        return self.conditional(Cell(tuple(z), tuple(x), free, free), given).estimate

    def x_law(self, x: Sequence[int]) -> float:
        """Pr[X^t = x]."""
        t = len(x)
        free = (None,) * t
        total = self.measure(Cell(free, free, free, free))
        return self.measure(Cell(free, tuple(x), free, free)) / total

    def subvector(self, z: Sequence[Optional[int]], x: Sequence[Optional[int]], y: Pattern, d: Pattern) -> CellStats:
        """Pr[Y^t, D^t match the patterns | z, x]."""
        t = len(z)
        free = (None,) * t
        return self.conditional(Cell(tuple(z), tuple(x), tuple(y), tuple(d)), Cell(tuple(z), tuple(x), free, free))

    def metadata(self) -> Dict[str, object]:
        return {"backend": self.backend.value, "horizon": self.horizon, "grid_sizes": list(self.grid_sizes)}


class ExactEvaluator(PopulationEvaluator):
    backend = Backend.EXACT

    def __init__(self, model: StructuralModel, quad_order: Optional[int] = None):
        if model.latent.mode != LatentMode.RANK_INVARIANT:
            raise UnsupportedLatent("exact backend supports the RankInvariant mode only; use the mc backend")
        if model.T > settings.MAX_EXACT_HORIZON:
            raise UnsupportedLatent(
                f"exact backend supports T <= {settings.MAX_EXACT_HORIZON}, got T={model.T}; use the mc backend"
            )
        super().__init__(model.T, model.xgrid.sizes)
        self.model = model
        self.irreversible_y = model.irreversible_y
        self.rule = LatentQuadrature(model.latent, model.T, quad_order)
        self._tables: Dict[Tuple[Tuple[int, ...], Tuple[int, ...]], np.ndarray] = {}

    def _floor(self) -> float:
        return settings.MASS_FLOOR

    def path_table(self, z: Tuple[int, ...], x: Tuple[int, ...]) -> np.ndarray:
        """
        Pr[Y^t = y, D^t = d | Z^t = z, X^t = x] as an array indexed by y + d.
        """
        key = (z, x)
        table = self._tables.get(key)
        if table is not None:
            return table

        t = len(z)
        model, rule = self.model, self.rule
        table = np.zeros((2,) * (2 * t))

        def walk(s, ys, ds, mass):
            if s == t:
                table[ys + ds] = rule.integrate(mass)
                return
            pi = model.pi_value(s, ys, ds, z[s])
            for d in (0, 1):
                p_d = rule.treatment(s, pi, d)
                mu = model.mu_value(s, ys, ds + (d,), x[s])
                for y in (0, 1):
                    walk(s + 1, ys + (y,), ds + (d,), mass * p_d * rule.outcome(s, mu, y))

        walk(0, (), (), np.ones(rule.size))
        self._tables[key] = table
        return table

    def _measure(self, cell: Cell) -> float:
        t = cell.t
        if t == 0:
            return 1.0
        z_choices = [(0, 1) if v is None else (v,) for v in cell.z]
        x_choices = [range(self.grid_sizes[s]) if v is None else (v,) for s, v in enumerate(cell.x)]
        index = tuple(slice(None) if v is None else v for v in cell.y + cell.d)
        total = 0.0
        for z in itertools.product(*z_choices):
            z_weight = math.prod(self.model.z_law[s] if z[s] else 1.0 - self.model.z_law[s] for s in range(t))
            for x in itertools.product(*x_choices):
                x_weight = math.prod(float(self.model.x_law[s][x[s]]) for s in range(t))
                weight = z_weight * x_weight
                if weight == 0.0:
                    continue
                total += weight * float(np.sum(self.path_table(z, x)[index]))
        return total

    def metadata(self) -> Dict[str, object]:
        meta = super().metadata()
        meta.update({"quad_order": self.rule.order, "quad_nodes": self.rule.size})
        return meta


class CountingEvaluator(PopulationEvaluator):
    """
    Frequency backend over a panel; rows are compressed to distinct records with multiplicities.
    """

    def __init__(
        self,
        panel: PanelData,
        backend: Backend = Backend.EMPIRICAL,
        min_cell_count: Optional[int] = None,
        grid_sizes: Optional[Sequence[int]] = None,
        metadata: Optional[Dict[str, object]] = None,
    ):
        if panel.n == 0:
            raise ValueError("empirical evaluator needs a nonempty panel")
        if grid_sizes is None:
            grid_sizes = (panel.x.max(axis=0) + 1).tolist()
        super().__init__(panel.T, grid_sizes)
        self.backend = backend
        if min_cell_count is None:
            min_cell_count = settings.MC_CELL_FLOOR if backend == Backend.MC else settings.EMPIRICAL_CELL_FLOOR
        self.min_cell_count = int(min_cell_count)
        self._extra_metadata = dict(metadata or {})

        records = np.concatenate([panel.z, panel.x, panel.y, panel.d], axis=1)
        self.records, self._inverse = np.unique(records, axis=0, return_inverse=True)
        self._inverse = np.asarray(self._inverse).ravel()
        self.counts = np.bincount(self._inverse, minlength=len(self.records)).astype(float)
        self.n = panel.n

    def reweighted(self, multiplicity: np.ndarray) -> "CountingEvaluator":
        """
        Same records with per-individual multiplicities (a bootstrap resample).
        """
        clone = object.__new__(CountingEvaluator)
        PopulationEvaluator.__init__(clone, self.horizon, self.grid_sizes)
        clone.backend = self.backend
        clone.irreversible_y = self.irreversible_y
        clone.min_cell_count = self.min_cell_count
        clone._extra_metadata = self._extra_metadata
        clone.records = self.records
        clone._inverse = self._inverse
        clone.counts = np.bincount(self._inverse, weights=multiplicity, minlength=len(self.records))
        clone.n = int(round(float(np.sum(multiplicity))))
        return clone

    def _floor(self) -> float:
        return float(max(self.min_cell_count, 1))

    def _measure(self, cell: Cell) -> float:
        T = self.horizon
        mask = np.ones(len(self.records), dtype=bool)
        for block, pattern in enumerate((cell.z, cell.x, cell.y, cell.d)):
            for s, value in enumerate(pattern):
                if value is not None:
                    mask &= self.records[:, block * T + s] == value
        return float(self.counts[mask].sum())

    def metadata(self) -> Dict[str, object]:
        meta = super().metadata()
        meta.update({"n": self.n, "min_cell_count": self.min_cell_count, "distinct_records": len(self.records)})
        meta.update(self._extra_metadata)
        return meta


def exact_evaluator(m: StructuralModel, quad_order: Optional[int] = None) -> ExactEvaluator:
    return ExactEvaluator(m, quad_order)


def mc_population_evaluator(
    m: StructuralModel, draws: Optional[int] = None, seed: Optional[int] = None, min_cell_count: Optional[int] = None
) -> CountingEvaluator:
    """
    Counting evaluator over a large simulated population.

    Args:
        m: Structural model
        draws: Simulated individuals (at least settings.MC_MIN_DRAWS)
        seed: Simulation seed
        min_cell_count: Conditioning floor (default settings.MC_CELL_FLOOR)

    Returns:
        Evaluator whose queries are deterministic given the seed
    """
    from dyntx.services.simulate import simulate_panel

    draws = settings.MC_DRAWS if draws is None else int(draws)
    seed = settings.DEFAULT_SEED if seed is None else int(seed)
    if draws < settings.MC_MIN_DRAWS:
        raise ValueError(f"mc backend needs at least {settings.MC_MIN_DRAWS} draws, got {draws}")
    panel = simulate_panel(m, draws, seed)
    logger.info(f"Built Monte Carlo population with {draws} draws (seed {seed})")
    ev = CountingEvaluator(
        panel,
        backend=Backend.MC,
        min_cell_count=min_cell_count,
        grid_sizes=m.xgrid.sizes,
        metadata={"draws": draws, "seed": seed},
    )
    ev.irreversible_y = m.irreversible_y
    return ev


def empirical_evaluator(
    data: PanelData,
    min_cell_count: Optional[int] = None,
    grid_sizes: Optional[Sequence[int]] = None,
    irreversible_y: bool = False,
) -> CountingEvaluator:
    """
    Frequency evaluator over an observed panel.

    ``irreversible_y`` declares outcomes absorbing, which the recursion uses
    in place of matching at histories that already reached Y = 1.
    """
    ev = CountingEvaluator(data, backend=Backend.EMPIRICAL, min_cell_count=min_cell_count, grid_sizes=grid_sizes)
    ev.irreversible_y = irreversible_y
    return ev
