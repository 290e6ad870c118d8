"""
Reference designs with known matching structure.

Every design uses the cyclic construction: with base levels a_0 < ... < a_{K-1}
on the grid, mu_t(y, d^{t-1}, d_t, x_j) = a_{(j + d_t) mod K} + c_t(y, d^{t-1}).
Treated x_j is then index-equivalent to untreated x_{j+1}, so every grid point
has exactly one matched partner in every history cell. The reference designs
set the lagged-treatment shift of mu to zero: substituted branches carry the
flipped treatment forward, which is exact only without such carryover.
"""
from typing import Optional, Sequence

import numpy as np

from dyntx.models.structural import LatentSpec, StructuralModel, build_model

DGP_A_GRID = (-1.0, -0.5, 0.0, 0.5, 1.0)


def cyclic_design(
    horizon: int,
    levels: Sequence[float],
    history_shift: Sequence[float],
    pi_base: float,
    pi_z: float,
    pi_history: Sequence[float],
    latent: LatentSpec,
    z_prob: float = 0.5,
    irreversible_d: bool = False,
    untreated: Sequence[int] = (),
) -> StructuralModel:
    """
    Build a cyclic-matching design.

    Args:
        horizon: Number of periods
        levels: Base outcome thresholds a_j, also used as grid values
        history_shift: (lagged-outcome, lagged-treatment) shifts of mu
        pi_base: Selection intercept
        pi_z: Instrument coefficient in the selection index
        pi_history: (lagged-outcome, lagged-treatment) shifts of pi
        latent: Latent law
        z_prob: Pr[Z_t = 1]
        irreversible_d: Absorbing treatment policy
        untreated: 1-based periods whose outcome index ignores the treatment

    Returns:
        The tabulated model
    """
    levels = tuple(float(v) for v in levels)
    K = len(levels)

    def mu_fn(t, ys, ds, x_value, k):
        shift = 0.0
        if t > 1:
            shift = history_shift[0] * ys[-1] + history_shift[1] * ds[-2]
        step = 0 if t in untreated else ds[-1]
        return levels[(k + step) % K] + shift

    def pi_fn(t, ys, ds_prev, z):
        value = pi_base + pi_z * z
        if t > 1:
            value += pi_history[0] * ys[-1] + pi_history[1] * ds_prev[-1]
        return value

    return build_model(
        horizon=horizon,
        x_grid=[levels] * horizon,
        mu_fn=mu_fn,
        pi_fn=pi_fn,
        latent=latent,
        z_law=[z_prob] * horizon,
        irreversible_d=irreversible_d,
    )


def dgp_a(rho_uv: float = 0.5, rho_time: float = 0.3, rho_cross: float = 0.15, horizon: int = 2) -> StructuralModel:
    """The endogenous two-period design on which every assumption holds."""
    return cyclic_design(
        horizon=horizon,
        levels=DGP_A_GRID,
        history_shift=(0.3, 0.0),
        pi_base=-0.4,
        pi_z=0.9,
        pi_history=(0.2, 0.3),
        latent=LatentSpec.blocks(horizon, rho_uv, rho_time, rho_cross),
    )


def dgp_b(drop: int = 4, model: Optional[StructuralModel] = None) -> StructuralModel:
    """DGP-A with one grid point removed at the last period, so some matches no longer exist."""
    model = dgp_a() if model is None else model
    return model.drop_grid_point(model.T - 1, drop)


def random_design(rng: np.random.Generator, horizon: int = 2) -> StructuralModel:
    """
    Draw a cyclic design with random levels, shifts, selection coefficients and correlations.
    """
    levels = np.sort(rng.uniform(-1.2, 1.2, size=5))
    while np.min(np.diff(levels)) < 0.1:
        levels = np.sort(rng.uniform(-1.2, 1.2, size=5))
    # Ranges keep the smallest eigenvalue of the correlation matrix above 0.1
    rho_uv = rng.uniform(-0.5, 0.5)
    rho_time = rng.uniform(-0.25, 0.25)
    rho_cross = rng.uniform(-0.15, 0.15)
    return cyclic_design(
        horizon=horizon,
        levels=levels,
        history_shift=(rng.uniform(-0.3, 0.3), 0.0),
        pi_base=rng.uniform(-0.5, 0.0),
        pi_z=rng.uniform(0.7, 1.2),
        pi_history=tuple(rng.uniform(-0.3, 0.3, size=2)),
        latent=LatentSpec.blocks(horizon, rho_uv, rho_time, rho_cross),
        z_prob=rng.uniform(0.35, 0.65),
    )
