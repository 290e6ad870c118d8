"""
Domain types for the dynamic threshold-crossing model.

Outcome and selection equations, period by period:

    D_t = 1{pi_t(y^{t-1}, d^{t-1}, z_t) >= V_t}
    Y_t = 1{mu_t(y^{t-1}, d^t, x_t) >= U_t(D_t)}

with Y_0 = D_0 = 0. Thresholds are stored as numpy tables indexed by
bit tuples, so ``mu[s][y^{t-1} + d^t + (x,)]`` is the outcome threshold of
period ``t = s + 1`` (0-based ``s`` everywhere inside the package, 1-based in
user-facing text and files).
"""
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from dyntx.core.config import settings
from dyntx.core.exceptions import ModelValidationError, RegimeError

# Configure logging
logger = logging.getLogger(__name__)

Bits = Tuple[int, ...]
Horizon = int


def bits_from_string(text: str) -> Bits:
    """Parse a '0'/'1' string ordered t=1..T."""
    if any(ch not in "01" for ch in text):
        raise RegimeError(f"not a bit string: '{text}'")
    return tuple(int(ch) for ch in text)


def bits_to_string(bits: Sequence[Optional[int]]) -> str:
    return "".join("*" if b is None else str(int(b)) for b in bits)


@dataclass(frozen=True)
class Regime:
    """A nondynamic treatment sequence, optionally masked to a subsequence of periods."""

    d: Bits
    active: Bits = ()

    def __post_init__(self):
        d = tuple(int(b) for b in self.d)
        active = tuple(int(b) for b in self.active) if self.active else (1,) * len(d)
        if len(d) == 0:
            raise RegimeError("empty regime")
        if len(active) != len(d):
            raise RegimeError("regime length mismatch: mask and treatment sequence differ in length")
        if any(b not in (0, 1) for b in d + active):
            raise RegimeError(f"regime entries must be bits: d={d}, active={active}")
        if not any(active):
            raise RegimeError("regime mask has no active period")
        if any(bit and not on for bit, on in zip(d, active)):
            raise RegimeError("inactive positions of a masked regime must be stored as 0")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "active", active)

    @classmethod
    def from_string(cls, text: str) -> "Regime":
        """
        Parse '101' (all periods active) or '1*' (starred periods inactive).
        """
        if any(ch not in "01*" for ch in text):
            raise RegimeError(f"cannot parse regime '{text}'")
        d = tuple(0 if ch == "*" else int(ch) for ch in text)
        active = tuple(0 if ch == "*" else 1 for ch in text)
        return cls(d, active)

    @property
    def T(self) -> int:
        return len(self.d)

    @property
    def is_masked(self) -> bool:
        return not all(self.active)

    @property
    def label(self) -> str:
        return "".join(str(b) if on else "*" for b, on in zip(self.d, self.active))

    def is_active(self, s: int) -> bool:
        return bool(self.active[s])

    def flip(self, s: int) -> "Regime":
        if not self.active[s]:
            raise RegimeError(f"cannot flip inactive period {s + 1}")
        d = list(self.d)
        d[s] = 1 - d[s]
        return Regime(tuple(d), self.active)

    def truncate(self, horizon: int) -> "Regime":
        return Regime(self.d[:horizon], self.active[:horizon])

    def is_monotone(self) -> bool:
        active_bits = [b for b, on in zip(self.d, self.active) if on]
        return all(a <= b for a, b in zip(active_bits, active_bits[1:]))

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True)
class XGrid:
    values: Tuple[Tuple[float, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(tuple(float(v) for v in row) for row in self.values))

    def size(self, s: int) -> int:
        return len(self.values[s])

    @property
    def sizes(self) -> Tuple[int, ...]:
        return tuple(len(row) for row in self.values)


class LatentMode(str, Enum):
    RANK_INVARIANT = "RankInvariant"
    RS_GENERAL = "RSGeneral"


@dataclass(frozen=True, eq=False)
class LatentSpec:
    """
    Joint law of the unobservables.

    RankInvariant: ``corr`` is the 2T x 2T correlation matrix of
    (U_1..U_T, V_1..V_T) with U_t(1) = U_t(0).
    RSGeneral: U_t(d) = a_t*alpha + b_t*eps_t(d), V_t = c_t*alpha + e_t*eta_t.
    """

    mode: LatentMode
    corr: Optional[np.ndarray] = None
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    e: Optional[np.ndarray] = None

    @classmethod
    def rank_invariant(cls, corr) -> "LatentSpec":
        return cls(LatentMode.RANK_INVARIANT, corr=np.asarray(corr, dtype=float))

    @classmethod
    def independent(cls, horizon: int) -> "LatentSpec":
        return cls.rank_invariant(np.eye(2 * horizon))

    @classmethod
    def blocks(cls, horizon: int, rho_uv: float, rho_time: float = 0.0, rho_cross: float = 0.0) -> "LatentSpec":
        """
        Rank-invariant law with corr(U_t, V_t) = rho_uv, corr(U_t, U_s) = corr(V_t, V_s) = rho_time
        and corr(U_t, V_s) = rho_cross for t != s.
        """
        T = horizon
        corr = np.eye(2 * T)
        for t in range(T):
            corr[t, T + t] = corr[T + t, t] = rho_uv
            for s in range(T):
                if s != t:
                    corr[t, s] = corr[T + t, T + s] = rho_time
                    corr[t, T + s] = corr[T + s, t] = rho_cross
        return cls.rank_invariant(corr)

    @classmethod
    def rs_general(cls, a: Sequence[float], c: Sequence[float]) -> "LatentSpec":
        a = np.asarray(a, dtype=float)
        c = np.asarray(c, dtype=float)
        return cls(
            LatentMode.RS_GENERAL,
            a=a,
            b=np.sqrt(np.clip(1.0 - a ** 2, 0.0, None)),
            c=c,
            e=np.sqrt(np.clip(1.0 - c ** 2, 0.0, None)),
        )

    def to_dict(self) -> Dict:
        if self.mode == LatentMode.RANK_INVARIANT:
            return {"mode": self.mode.value, "corr": self.corr.tolist()}
        return {
            "mode": self.mode.value,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "c": self.c.tolist(),
            "e": self.e.tolist(),
        }


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


@dataclass(frozen=True, eq=False)
class StructuralModel:
    horizon: Horizon
    xgrid: XGrid
    mu: Tuple[np.ndarray, ...]
    pi: Tuple[np.ndarray, ...]
    latent: LatentSpec
    z_law: Tuple[float, ...]
    x_law: Tuple[np.ndarray, ...]
    irreversible_d: bool = False
    irreversible_y: bool = False

    @property
    def T(self) -> int:
        return self.horizon

    def K(self, s: int) -> int:
        return self.xgrid.size(s)

    def mu_value(self, s: int, ys: Sequence[int], ds: Sequence[int], x: int) -> float:
        return float(self.mu[s][tuple(ys) + tuple(ds) + (x,)])

    def pi_value(self, s: int, ys: Sequence[int], ds_prev: Sequence[int], z: int) -> float:
        return float(self.pi[s][tuple(ys) + tuple(ds_prev) + (z,)])

    def mu_gap(self, s: int, ys: Sequence[int], d_prev: Sequence[int], x: int, x_tilde: int) -> float:
        """
        mu_t(y^{t-1}, d^{t-1}, 1, x) - mu_t(y^{t-1}, d^{t-1}, 0, x_tilde); equal infinities give 0.
        """
        treated = self.mu_value(s, ys, tuple(d_prev) + (1,), x)
        control = self.mu_value(s, ys, tuple(d_prev) + (0,), x_tilde)
        if treated == control:
            return 0.0
        return treated - control

    def mu_partners(
        self, s: int, ys: Sequence[int], d_prev: Sequence[int], arm: int, x: int, tol: float = 1e-8
    ) -> List[int]:
        """
        Grid indices x_tilde with mu(., arm, x) = mu(., 1 - arm, x_tilde), read off the table directly.
        """
        partners = []
        for k in range(self.K(s)):
            gap = self.mu_gap(s, ys, d_prev, x, k) if arm == 1 else -self.mu_gap(s, ys, d_prev, k, x)
            if abs(gap) <= tol:
                partners.append(k)
        return partners

    def drop_grid_point(self, s: int, k: int) -> "StructuralModel":
        """
        Remove grid point k from period s (0-based), renormalizing the x law.
        """
        keep = [j for j in range(self.K(s)) if j != k]
        values = list(self.xgrid.values)
        values[s] = tuple(values[s][j] for j in keep)
        mu = list(self.mu)
        mu[s] = np.take(mu[s], keep, axis=-1)
        x_law = list(self.x_law)
        law = np.asarray(x_law[s])[keep]
        x_law[s] = law / law.sum()
        return replace(self, xgrid=XGrid(tuple(values)), mu=tuple(mu), x_law=tuple(x_law))

    def with_latent(self, latent: LatentSpec) -> "StructuralModel":
        return replace(self, latent=latent)

    def check_regime(self, regime: Regime) -> None:
        if regime.T != self.T:
            raise RegimeError(f"regime length mismatch: regime has {regime.T} periods, model has {self.T}")
        if self.irreversible_d and not regime.is_monotone():
            raise RegimeError(f"regime {regime.label} violates the irreversible-treatment policy")

    def check_x(self, x: Sequence[Optional[int]], horizon: Optional[int] = None) -> Tuple[Optional[int], ...]:
        horizon = self.T if horizon is None else horizon
        x = tuple(None if v is None else int(v) for v in x)
        if len(x) != horizon:
            raise RegimeError(f"x vector length mismatch: got {len(x)}, expected {horizon}")
        for s, v in enumerate(x):
            if v is not None and not 0 <= v < self.K(s):
                raise RegimeError(f"x index {v} out of range at t={s + 1} (grid size {self.K(s)})")
        return x


@dataclass(frozen=True)
class Stratum:
    w0: int
    share: float
    model: StructuralModel


@dataclass(frozen=True)
class StratifiedModel:
    """Independent structural models per discrete pre-treatment stratum W_0."""

    strata: Tuple[Stratum, ...] = field(default_factory=tuple)

    @property
    def horizon(self) -> int:
        return self.strata[0].model.horizon

    @classmethod
    def single(cls, model: StructuralModel) -> "StratifiedModel":
        return cls((Stratum(0, 1.0, model),))

    def model_for(self, w0: int) -> StructuralModel:
        for stratum in self.strata:
            if stratum.w0 == w0:
                return stratum.model
        raise KeyError(f"unknown stratum w0={w0}")


def _is_total(table: np.ndarray) -> bool:
    return not np.isnan(table).any()


def validate_model(m: StructuralModel) -> List[Violation]:
    """
    Collect every invariant violation of a structural model.

    Returns:
        List of violations with machine-readable codes (empty when valid)
    """
    violations: List[Violation] = []

    def add(code: str, message: str):
        violations.append(Violation(code, message))

    T = m.horizon
    if not 1 <= T <= settings.MAX_HORIZON:
        add("horizon_out_of_range", f"T={T} outside 1..{settings.MAX_HORIZON}")
        return violations

    # Grids
    if len(m.xgrid.values) != T:
        add("xgrid_length", f"x_grid has {len(m.xgrid.values)} periods, expected {T}")
        return violations
    for s, row in enumerate(m.xgrid.values):
        if len(row) < 1:
            add("xgrid_empty", f"empty grid at t={s + 1}")
        if any(b <= a for a, b in zip(row, row[1:])):
            add("xgrid_not_increasing", f"grid at t={s + 1} is not strictly increasing")

    # Tables
    if len(m.mu) != T or len(m.pi) != T:
        add("table_length", "mu_table/pi_table must have one entry per period")
        return violations
    for s in range(T):
        mu_shape = (2,) * s + (2,) * (s + 1) + (m.K(s),)
        pi_shape = (2,) * s + (2,) * s + (2,)
        if m.mu[s].shape != mu_shape:
            add("mu_table_shape", f"mu at t={s + 1} has shape {m.mu[s].shape}, expected {mu_shape}")
        elif not _is_total(m.mu[s]):
            add("mu_table_incomplete", f"mu at t={s + 1} has {int(np.isnan(m.mu[s]).sum())} missing cells")
        if m.pi[s].shape != pi_shape:
            add("pi_table_shape", f"pi at t={s + 1} has shape {m.pi[s].shape}, expected {pi_shape}")
        elif not _is_total(m.pi[s]):
            add("pi_table_incomplete", f"pi at t={s + 1} has {int(np.isnan(m.pi[s]).sum())} missing cells")

    # Laws
    if len(m.z_law) != T or any(not 0.0 < p < 1.0 for p in m.z_law):
        add("z_law_invalid", "z_law needs one probability in (0, 1) per period")
    if len(m.x_law) != T:
        add("x_law_invalid", "x_law needs one probability vector per period")
    else:
        for s, law in enumerate(m.x_law):
            law = np.asarray(law, dtype=float)
            if law.shape != (m.K(s),) or (law < 0).any() or abs(law.sum() - 1.0) > 1e-9:
                add("x_law_invalid", f"x_law at t={s + 1} is not a distribution over {m.K(s)} grid points")

    violations.extend(_validate_latent(m.latent, T))
    if not any(v.code.endswith("shape") or v.code.endswith("incomplete") for v in violations):
        violations.extend(_validate_irreversibility(m))
    return violations


def _validate_latent(latent: LatentSpec, T: int) -> List[Violation]:
    violations = []
    if latent.mode == LatentMode.RANK_INVARIANT:
        corr = latent.corr
        if corr is None or corr.shape != (2 * T, 2 * T):
            return [Violation("latent_shape", f"correlation matrix must be {2 * T}x{2 * T}")]
        if not np.isfinite(corr).all():
            return [Violation("latent_not_finite", "correlation matrix has non-finite entries")]
        if not np.allclose(corr, corr.T, atol=1e-12):
            violations.append(Violation("latent_not_symmetric", "correlation matrix is not symmetric"))
        if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
            violations.append(Violation("latent_not_unit_diagonal", "correlation matrix diagonal must be 1"))
        eigenvalues = np.linalg.eigvalsh((corr + corr.T) / 2.0)
        if eigenvalues.min() <= 1e-10:
            violations.append(
                Violation("latent_not_pd", f"smallest eigenvalue {eigenvalues.min():.4g} is not positive")
            )
    else:
        loadings = [latent.a, latent.b, latent.c, latent.e]
        if any(v is None or np.shape(v) != (T,) for v in loadings):
            return [Violation("latent_shape", f"factor loadings a, b, c, e must have length {T}")]
        if not np.allclose(latent.a ** 2 + latent.b ** 2, 1.0, atol=1e-9) or not np.allclose(
            latent.c ** 2 + latent.e ** 2, 1.0, atol=1e-9
        ):
            violations.append(Violation("latent_loadings", "loadings must satisfy a^2+b^2=1 and c^2+e^2=1"))
        if (np.abs(latent.b) < 1e-12).any() or (np.abs(latent.e) < 1e-12).any():
            violations.append(Violation("latent_degenerate", "idiosyncratic loadings b, e must be nonzero"))
    return violations


def _validate_irreversibility(m: StructuralModel) -> List[Violation]:
    violations = []
    for s in range(1, m.T):
        for ys in itertools.product((0, 1), repeat=s):
            for ds in itertools.product((0, 1), repeat=s):
                for z in (0, 1):
                    value = m.pi_value(s, ys, ds, z)
                    if m.irreversible_d and ds[-1] == 1 and value != math.inf:
                        violations.append(
                            Violation(
                                "irreversible_d_pattern",
                                f"pi at t={s + 1}, y={bits_to_string(ys)}, d={bits_to_string(ds)} must be +inf",
                            )
                        )
                        return violations
                    absorbed_d = m.irreversible_d and ds[-1] == 1
                    if m.irreversible_y and ys[-1] == 1 and not absorbed_d and value != -math.inf:
                        violations.append(
                            Violation(
                                "irreversible_y_pattern",
                                f"pi at t={s + 1}, y={bits_to_string(ys)}, d={bits_to_string(ds)} must be -inf",
                            )
                        )
                        return violations
            if m.irreversible_y and ys[-1] == 1:
                if not np.all(m.mu[s][ys] == math.inf):
                    violations.append(
                        Violation("irreversible_y_pattern", f"mu at t={s + 1}, y={bits_to_string(ys)} must be +inf")
                    )
                    return violations
    return violations


def apply_irreversibility(m: StructuralModel) -> StructuralModel:
    """
    Write the +/-inf threshold pattern of absorbing treatments and outcomes into the tables.

    Irreversible outcome: mu_t = +inf and pi_t = -inf once y_{t-1} = 1. Irreversible
    treatment: pi_t = +inf once d_{t-1} = 1, taking precedence over the outcome rule.
    """
    mu = [table.copy() for table in m.mu]
    pi = [table.copy() for table in m.pi]
    for s in range(1, m.T):
        if m.irreversible_y:
            mu[s][(slice(None),) * (s - 1) + (1,)] = math.inf
            pi[s][(slice(None),) * (s - 1) + (1,)] = -math.inf
        if m.irreversible_d:
            pi[s][(slice(None),) * (2 * s - 1) + (1,)] = math.inf
    return replace(m, mu=tuple(mu), pi=tuple(pi))


def build_model(
    horizon: int,
    x_grid: Sequence[Sequence[float]],
    mu_fn: Callable[[int, Bits, Bits, float, int], float],
    pi_fn: Callable[[int, Bits, Bits, int], float],
    latent: LatentSpec,
    z_law: Optional[Sequence[float]] = None,
    x_law: Optional[Sequence[Sequence[float]]] = None,
    irreversible_d: bool = False,
    irreversible_y: bool = False,
    strict: bool = True,
) -> StructuralModel:
    """
    Tabulate threshold callables into a StructuralModel.

    Args:
        horizon: Number of periods T
        x_grid: Grid values per period
        mu_fn: mu(t, y^{t-1}, d^t, x_value, x_index) with 1-based t
        pi_fn: pi(t, y^{t-1}, d^{t-1}, z) with 1-based t
        latent: Latent law
        z_law: Pr[Z_t = 1] per period (default 0.5)
        x_law: Probability vectors per period (default uniform)
        irreversible_d: Absorbing treatment policy
        irreversible_y: Absorbing outcome policy
        strict: Raise ModelValidationError on any violation

    Returns:
        The tabulated model
    """
    grid = XGrid(tuple(tuple(row) for row in x_grid))
    mu, pi = [], []
    for s in range(horizon):
        K = grid.size(s)
        mu_table = np.empty((2,) * s + (2,) * (s + 1) + (K,))
        for ys in itertools.product((0, 1), repeat=s):
            for ds in itertools.product((0, 1), repeat=s + 1):
                for k in range(K):
                    mu_table[ys + ds + (k,)] = mu_fn(s + 1, ys, ds, grid.values[s][k], k)
        pi_table = np.empty((2,) * s + (2,) * s + (2,))
        for ys in itertools.product((0, 1), repeat=s):
            for ds in itertools.product((0, 1), repeat=s):
                for z in (0, 1):
                    pi_table[ys + ds + (z,)] = pi_fn(s + 1, ys, ds, z)
        mu.append(mu_table)
        pi.append(pi_table)

    if z_law is None:
        z_law = (0.5,) * horizon
    if x_law is None:
        x_law = [np.full(grid.size(s), 1.0 / grid.size(s)) for s in range(horizon)]

    model = StructuralModel(
        horizon=horizon,
        xgrid=grid,
        mu=tuple(mu),
        pi=tuple(pi),
        latent=latent,
        z_law=tuple(float(p) for p in z_law),
        x_law=tuple(np.asarray(law, dtype=float) for law in x_law),
        irreversible_d=irreversible_d,
        irreversible_y=irreversible_y,
    )
    if irreversible_d or irreversible_y:
        model = apply_irreversibility(model)

    if strict:
        violations = validate_model(model)
        if violations:
            raise ModelValidationError(violations)
    return model


def enumerate_histories(s: int) -> List[Tuple[Bits, Bits]]:
    """All (y^{s}, d^{s}) pairs of length s."""
    return [
        (ys, ds)
        for ys in itertools.product((0, 1), repeat=s)
        for ds in itertools.product((0, 1), repeat=s)
    ]


def treatment_carryover(m: StructuralModel) -> List[int]:
    """
    Periods t whose outcome index depends on d^{t-1} at fixed (y^{t-1}, d_t, x_t).

    The identification recursion carries a flipped treatment into later
    periods, so it reproduces the potential outcomes exactly only when this list is empty.
    """
    periods = []
    for s in range(1, m.T):
        table = m.mu[s]
        base = table[(slice(None),) * s + (0,) * s]
        for ds in itertools.product((0, 1), repeat=s):
            if not np.array_equal(table[(slice(None),) * s + ds], base):
                periods.append(s + 1)
                break
    return periods


def free_treatment_dependence(m: StructuralModel, regime: Regime, horizon: Optional[int] = None) -> List[int]:
    """
    Periods t whose outcome index depends on a treatment the masked regime
    leaves to selection after its first intervention.

    Only outcomes free of such treatments follow the subsequence model, where
    untreated periods are plain dynamic transitions of the lagged outcome.
    """
    H = m.T if horizon is None else horizon
    active = regime.active[:H]
    if all(active) or not any(active):
        return []
    first = active.index(1)
    free = [j for j in range(first + 1, H) if not active[j]]
    periods = []
    for s in range(H):
        table = m.mu[s]
        # axes: y^{s} first, then d^{s+1}, then the grid index
        for j in (j for j in free if j <= s):
            axis = s + j
            if not np.array_equal(np.take(table, 0, axis=axis), np.take(table, 1, axis=axis)):
                periods.append(s + 1)
                break
    return periods
