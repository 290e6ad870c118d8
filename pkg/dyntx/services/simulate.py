import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from dyntx.core.config import settings
from dyntx.core.exceptions import DegenerateConditioning, ModelValidationError, RegimeError
from dyntx.models.panel import PanelData
from dyntx.models.structural import (
    LatentMode,
    Regime,
    StratifiedModel,
    StructuralModel,
    bits_to_string,
    validate_model,
)
from dyntx.services.quadrature import LatentQuadrature

# Configure logging
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConditionalValue:
    t: int
    y_history: str
    value: float
    std_error: float
    mass: float


@dataclass(frozen=True)
class OracleResult:
    regime: Regime
    x: Tuple[Optional[int], ...]
    values: Tuple[float, ...]
    std_errors: Tuple[float, ...]
    draws: Optional[int]
    seed: Optional[int]
    method: str
    conditional: Tuple[ConditionalValue, ...] = field(default_factory=tuple)

    @property
    def value(self) -> float:
        """Terminal ARSF E[Y_T(d) | x]."""
        return self.values[-1]

    @property
    def std_error(self) -> float:
        return self.std_errors[-1]

    def records(self) -> List[Dict[str, object]]:
        return [
            {
                "regime": self.regime.label,
                "t": t + 1,
                "value": value,
                "std_error": se,
                "draws": self.draws,
                "seed": self.seed,
            }
            for t, (value, se) in enumerate(zip(self.values, self.std_errors))
        ]


@dataclass(frozen=True)
class TransitionOracle:
    numerator: float
    denominator: float
    ratio: float
    std_error: float
    draws: Optional[int]


def _ensure_valid(m: StructuralModel) -> None:
    violations = validate_model(m)
    if violations:
        raise ModelValidationError(violations)


def _chunk_sizes(n: int, chunk_size: Optional[int] = None) -> List[int]:
    chunk_size = settings.SIM_CHUNK_SIZE if chunk_size is None else chunk_size
    sizes = [chunk_size] * (n // chunk_size)
    if n % chunk_size:
        sizes.append(n % chunk_size)
    return sizes


def draw_latents(m: StructuralModel, n: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """
    Draw U_t(0), U_t(1) and V_t for n individuals, each as an (n, T) array.
    """
    T = m.T
    latent = m.latent
    if latent.mode == LatentMode.RANK_INVARIANT:
        chol = np.linalg.cholesky(latent.corr)
        draws = rng.standard_normal((n, 2 * T)) @ chol.T
        u = draws[:, :T]
        return {"u0": u, "u1": u, "v": draws[:, T:]}

    alpha = rng.standard_normal(n)[:, None]
    eps0 = rng.standard_normal((n, T))
    eps1 = rng.standard_normal((n, T))
    eta = rng.standard_normal((n, T))
    return {
        "u0": latent.a * alpha + latent.b * eps0,
        "u1": latent.a * alpha + latent.b * eps1,
        "v": latent.c * alpha + latent.e * eta,
    }


def _draw_exogenous(m: StructuralModel, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    z = (rng.random((n, m.T)) < np.asarray(m.z_law)[None, :]).astype(np.int64)
    x = np.empty((n, m.T), dtype=np.int64)
    for s in range(m.T):
        x[:, s] = rng.choice(m.K(s), size=n, p=m.x_law[s])
    return z, x


def _history_index(y: np.ndarray, d: np.ndarray, s: int, n_d: int) -> tuple:
    return tuple(y[:, j] for j in range(s)) + tuple(d[:, j] for j in range(n_d))


def _simulate_chunk(m: StructuralModel, n: int, seed_seq: np.random.SeedSequence) -> Tuple[np.ndarray, ...]:
    rng = np.random.default_rng(seed_seq)
    latents = draw_latents(m, n, rng)
    z, x = _draw_exogenous(m, n, rng)
    y = np.zeros((n, m.T), dtype=np.int64)
    d = np.zeros((n, m.T), dtype=np.int64)
    for s in range(m.T):
        pi = m.pi[s][_history_index(y, d, s, s) + (z[:, s],)]
        d[:, s] = pi >= latents["v"][:, s]
        mu = m.mu[s][_history_index(y, d, s, s + 1) + (x[:, s],)]
        u = np.where(d[:, s] == 1, latents["u1"][:, s], latents["u0"][:, s])
        y[:, s] = mu >= u
    return y, d, x, z


def simulate_panel(
    m: Union[StructuralModel, StratifiedModel],
    n: int,
    seed: int,
    n_jobs: Optional[int] = None,
    chunk_size: Optional[int] = None,
) -> PanelData:
    """
    Draw an observed panel from the structural model.

    Individuals are simulated in fixed-size chunks, each seeded by its own child
    of SeedSequence(seed), so the panel does not depend on n_jobs.

    Args:
        m: Structural model, or a stratified model (fills the w0 column)
        n: Number of individuals
        seed: Master seed
        n_jobs: joblib workers (default settings.N_JOBS)
        chunk_size: Individuals per chunk (default settings.SIM_CHUNK_SIZE)

    Returns:
        PanelData with n rows
    """
    if isinstance(m, StratifiedModel):
        return _simulate_strata(m, n, seed, n_jobs, chunk_size)

    _ensure_valid(m)
    n_jobs = settings.N_JOBS if n_jobs is None else n_jobs
    sizes = _chunk_sizes(n, chunk_size)
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    chunks = Parallel(n_jobs=n_jobs)(
        delayed(_simulate_chunk)(m, size, child) for size, child in zip(sizes, children)
    )
    if not chunks:
        empty = np.zeros((0, m.T), dtype=np.int64)
        return PanelData(empty, empty, empty, empty)
    y, d, x, z = (np.concatenate(parts) for parts in zip(*chunks))
    logger.info(f"Simulated panel: n={n}, T={m.T}, seed={seed}, chunks={len(sizes)}")
    return PanelData(y, d, x, z)


def _simulate_strata(m: StratifiedModel, n: int, seed: int, n_jobs, chunk_size) -> PanelData:
    shares = np.array([stratum.share for stratum in m.strata])
    sizes = np.floor(shares / shares.sum() * n).astype(int)
    sizes[-1] = n - sizes[:-1].sum()
    children = np.random.SeedSequence(seed).spawn(len(m.strata))
    panels = []
    for stratum, size, child in zip(m.strata, sizes, children):
        panel = simulate_panel(stratum.model, int(size), int(child.generate_state(1)[0]), n_jobs, chunk_size)
        panels.append(PanelData(panel.y, panel.d, panel.x, panel.z, np.full(panel.n, stratum.w0)))
    return PanelData.concat(panels)


def _check_oracle_args(m: StructuralModel, regime: Regime, x: Sequence[Optional[int]]) -> Tuple[Optional[int], ...]:
    m.check_regime(regime)
    x = m.check_x(x)
    for s in range(m.T):
        if regime.is_active(s) and x[s] is None and not regime.is_masked:
            raise RegimeError(f"x must be given at every period of an unmasked regime (t={s + 1})")
    return x


def _forced_chunk(
    m: StructuralModel, regime: Regime, x: Tuple[Optional[int], ...], n: int, seed_seq: np.random.SeedSequence
) -> np.ndarray:
    """Counts of potential outcome paths Y^T(d) in one chunk, as a (2,)*T array."""
    rng = np.random.default_rng(seed_seq)
    latents = draw_latents(m, n, rng)
    z_draws, x_draws = _draw_exogenous(m, n, rng)
    y = np.zeros((n, m.T), dtype=np.int64)
    d = np.zeros((n, m.T), dtype=np.int64)
    for s in range(m.T):
        if regime.is_active(s):
            d[:, s] = regime.d[s]
        else:
            pi = m.pi[s][_history_index(y, d, s, s) + (z_draws[:, s],)]
            d[:, s] = pi >= latents["v"][:, s]
        x_s = x_draws[:, s] if x[s] is None else np.full(n, x[s])
        mu = m.mu[s][_history_index(y, d, s, s + 1) + (x_s,)]
        u = np.where(d[:, s] == 1, latents["u1"][:, s], latents["u0"][:, s])
        y[:, s] = mu >= u
    codes = y @ (2 ** np.arange(m.T - 1, -1, -1))
    return np.bincount(codes, minlength=2 ** m.T).reshape((2,) * m.T).astype(float)


def _forced_exact(
    m: StructuralModel, regime: Regime, x: Tuple[Optional[int], ...], quad_order: Optional[int]
) -> np.ndarray:
    """Probabilities of potential outcome paths Y^T(d), integrated by quadrature."""
    rule = LatentQuadrature(m.latent, m.T, quad_order)
    probs = np.zeros((2,) * m.T)

    def outcome_prob(s, ys, ds, y):
        if x[s] is not None:
            return rule.outcome(s, m.mu_value(s, ys, ds, x[s]), y)
        return sum(
            float(m.x_law[s][k]) * rule.outcome(s, m.mu_value(s, ys, ds, k), y) for k in range(m.K(s))
        )

    def treatment_prob(s, ys, ds, d):
        q = m.z_law[s]
        return q * rule.treatment(s, m.pi_value(s, ys, ds, 1), d) + (1.0 - q) * rule.treatment(
            s, m.pi_value(s, ys, ds, 0), d
        )

    def walk(s, ys, ds, mass):
        if s == m.T:
            probs[ys] += rule.integrate(mass)
            return
        if regime.is_active(s):
            options = [(regime.d[s], None)]
        else:
            options = [(0, treatment_prob(s, ys, ds, 0)), (1, treatment_prob(s, ys, ds, 1))]
        for d, p_d in options:
            branch = mass if p_d is None else mass * p_d
            for y in (0, 1):
                walk(s + 1, ys + (y,), ds + (d,), branch * outcome_prob(s, ys, ds + (d,), y))

    walk(0, (), (), np.ones(rule.size))
    return probs


def potential_path_distribution(
    m: StructuralModel,
    regime: Regime,
    x: Sequence[Optional[int]],
    draws: Optional[int] = None,
    seed: Optional[int] = None,
    method: str = "mc",
    quad_order: Optional[int] = None,
    n_jobs: Optional[int] = None,
) -> Tuple[np.ndarray, Optional[int]]:
    """
    Distribution of the potential outcome path (Y_1(d), ..., Y_T(d)) at fixed x.

    Treatments are forced at active periods; at inactive periods of a masked
    regime D_t follows the selection equation with Z_t drawn from its law.
    x entries set to None are drawn from the x law.

    Returns:
        (probabilities indexed by the y path, number of draws or None for the exact method)
    """
    _ensure_valid(m)
    x = _check_oracle_args(m, regime, x)
    if method == "exact":
        return _forced_exact(m, regime, x, quad_order), None
    if method != "mc":
        raise ValueError(f"unknown oracle method '{method}'")

    draws = settings.MC_DRAWS if draws is None else int(draws)
    seed = settings.DEFAULT_SEED if seed is None else int(seed)
    n_jobs = settings.N_JOBS if n_jobs is None else n_jobs
    sizes = _chunk_sizes(draws)
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    counts = Parallel(n_jobs=n_jobs)(
        delayed(_forced_chunk)(m, regime, x, size, child) for size, child in zip(sizes, children)
    )
    return np.sum(counts, axis=0) / draws, draws


def _binomial_se(p: float, n: Optional[float]) -> float:
    if n is None or n <= 0:
        return 0.0
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def oracle_arsf(
    m: StructuralModel,
    regime: Regime,
    x: Sequence[Optional[int]],
    draws: Optional[int] = None,
    seed: Optional[int] = None,
    method: str = "mc",
    quad_order: Optional[int] = None,
) -> OracleResult:
    """
    Ground-truth ARSFs E[Y_t(d) | x] for t = 1..T by forcing the regime.

    Args:
        m: Structural model
        regime: Forced regime (masked regimes leave inactive periods to selection)
        x: Grid-index vector held fixed; None entries are drawn from the x law
        draws: Monte Carlo draws (mc method)
        seed: Seed; equal seeds share random numbers across regimes
        method: "mc" or "exact" (quadrature, RankInvariant and T <= 3)
        quad_order: Quadrature order for the exact method

    Returns:
        OracleResult with per-period values and conditional variants given y-histories
    """
    probs, n = potential_path_distribution(m, regime, x, draws, seed, method, quad_order)
    T = m.T
    values, std_errors, conditional = [], [], []
    for s in range(T):
        axes = tuple(j for j in range(T) if j > s)
        marginal = probs.sum(axis=axes) if axes else probs
        value = float(marginal[(slice(None),) * s + (1,)].sum())
        values.append(value)
        std_errors.append(_binomial_se(value, n))
        if s == 0:
            continue
        for ys in itertools.product((0, 1), repeat=s):
            mass = float(marginal[ys].sum())
            if mass <= 0.0:
                continue
            p = float(marginal[ys + (1,)] / mass)
            conditional.append(
                ConditionalValue(s + 1, bits_to_string(ys), p, _binomial_se(p, None if n is None else mass * n), mass)
            )
    logger.debug(f"Oracle ARSF for regime {regime.label} at x={tuple(x)}: {values}")
    return OracleResult(
        regime=regime,
        x=tuple(x),
        values=tuple(values),
        std_errors=tuple(std_errors),
        draws=n,
        seed=seed if method == "mc" else None,
        method=method,
        conditional=tuple(conditional),
    )


def _event_index(T: int, y_minus: Dict[int, int], terminal: bool) -> tuple:
    index = [slice(None)] * T
    for period, value in y_minus.items():
        index[period - 1] = int(value)
    if terminal:
        index[T - 1] = 1
    return tuple(index)


def oracle_transition(
    m: StructuralModel,
    regime: Regime,
    y_minus: Dict[int, int],
    x: Sequence[Optional[int]],
    draws: Optional[int] = None,
    seed: Optional[int] = None,
    method: str = "mc",
    quad_order: Optional[int] = None,
) -> TransitionOracle:
    """
    Pr[Y_T(d)=1, Y_-(d)=y_- | x], Pr[Y_-(d)=y_- | x] and their ratio.

    Args:
        y_minus: 1-based period -> outcome value, periods before T
    """
    T = m.T
    if any(not 1 <= period < T for period in y_minus):
        raise RegimeError(f"conditioning periods must lie in 1..{T - 1}, got {sorted(y_minus)}")
    probs, n = potential_path_distribution(m, regime, x, draws, seed, method, quad_order)
    numerator = float(probs[_event_index(T, y_minus, True)].sum())
    denominator = float(probs[_event_index(T, y_minus, False)].sum())
    floor = 10.0 / n if n else settings.MASS_FLOOR
    if denominator < floor:
        raise DegenerateConditioning(
            f"Pr[Y_-(d)={y_minus}] = {denominator:.3g} is below {floor:.3g} for regime {regime.label}"
        )
    ratio = numerator / denominator
    return TransitionOracle(numerator, denominator, ratio, _binomial_se(ratio, None if n is None else denominator * n), n)


def period_regime(T: int, d_last: int) -> Regime:
    """Regime forcing only the last period; earlier treatments follow selection."""
    if T == 1:
        return Regime((d_last,))
    return Regime((0,) * (T - 1) + (d_last,), (0,) * (T - 1) + (1,))


def oracle_period_ate(
    m: StructuralModel,
    y_prev: int,
    x: Sequence[int],
    draws: Optional[int] = None,
    seed: Optional[int] = None,
    method: str = "mc",
    quad_order: Optional[int] = None,
) -> Dict[str, float]:
    """
    E[Y_T(D^{T-1}, d_T) | Y_{T-1} = y_prev, x] for d_T in {0, 1} and their difference.
    """
    T = m.T
    means, errors = {}, {}
    for d_last in (0, 1):
        regime = period_regime(T, d_last)
        if T == 1:
            if y_prev != 0:
                raise DegenerateConditioning("Y_0 = 0, so y_prev must be 0 when T = 1")
            result = oracle_arsf(m, regime, x, draws, seed, method, quad_order)
            means[d_last], errors[d_last] = result.value, result.std_error
        else:
            result = oracle_transition(m, regime, {T - 1: y_prev}, x, draws, seed, method, quad_order)
            means[d_last], errors[d_last] = result.ratio, result.std_error
    return {
        "treated": means[1],
        "untreated": means[0],
        "ate": means[1] - means[0],
        "std_error": math.sqrt(errors[0] ** 2 + errors[1] ** 2),
    }
