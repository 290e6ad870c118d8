"""
Gauss-Hermite rule for the rank-invariant latent vector.

The correlation matrix R of (U_1..U_T, V_1..V_T) is split as
R = A A' + delta I with delta its smallest eigenvalue, so that

    L = A zeta + sqrt(delta) * eps,    zeta ~ N(0, I_m), eps ~ N(0, I_2T).

Conditional on zeta every coordinate is an independent normal with mean
(A zeta)_i and standard deviation sqrt(delta); threshold events become
products of normal CDFs and only zeta (m <= 2T - 1 dimensions) is integrated
by the tensor-product rule.
"""
import logging
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy.special import ndtr, roots_hermitenorm

from dyntx.core.config import settings
from dyntx.core.exceptions import UnsupportedLatent
from dyntx.models.structural import LatentMode, LatentSpec

# Configure logging
logger = logging.getLogger(__name__)


@lru_cache(maxsize=16)
def hermite_rule(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and probability weights for a standard normal."""
    nodes, weights = roots_hermitenorm(order)
    return nodes, weights / weights.sum()


class LatentQuadrature:
    def __init__(self, latent: LatentSpec, horizon: int, order: int = None, prune: float = None):
        if latent.mode != LatentMode.RANK_INVARIANT:
            raise UnsupportedLatent("quadrature requires the RankInvariant latent mode")
        order = settings.QUAD_ORDER if order is None else order
        prune = settings.QUAD_PRUNE if prune is None else prune
        if order < settings.QUAD_MIN_ORDER:
            raise ValueError(f"quad_order must be at least {settings.QUAD_MIN_ORDER}, got {order}")

        self.horizon = horizon
        self.order = order
        corr = (latent.corr + latent.corr.T) / 2.0
        eigenvalues, eigenvectors = np.linalg.eigh(corr)
        delta = float(eigenvalues.min())
        residual = eigenvalues - delta
        keep = residual > 1e-12 * max(1.0, float(eigenvalues.max()))
        loadings = eigenvectors[:, keep] * np.sqrt(residual[keep])
        self.scale = float(np.sqrt(delta))
        self.dimension = int(keep.sum())

        if self.dimension == 0:
            means = np.zeros((1, 2 * horizon))
            weights = np.ones(1)
        else:
            nodes_1d, weights_1d = hermite_rule(order)
            grids = np.meshgrid(*([nodes_1d] * self.dimension), indexing="ij")
            zeta = np.stack([g.ravel() for g in grids], axis=1)
            weight_grids = np.meshgrid(*([weights_1d] * self.dimension), indexing="ij")
            weights = np.prod(np.stack([g.ravel() for g in weight_grids], axis=1), axis=1)
            mask = weights >= prune * weights.max()
            zeta, weights = zeta[mask], weights[mask]
            weights = weights / weights.sum()
            means = zeta @ loadings.T

        self.weights = weights
        self.mean_u = np.ascontiguousarray(means[:, :horizon])
        self.mean_v = np.ascontiguousarray(means[:, horizon:])
        logger.debug(
            f"Quadrature rule: order {order}, dimension {self.dimension}, {weights.size} nodes, "
            f"conditional scale {self.scale:.4f}"
        )

    @property
    def size(self) -> int:
        return self.weights.size

    def below(self, threshold: float, means: np.ndarray) -> np.ndarray:
        """Pr[latent <= threshold | node] for each node."""
        return ndtr((threshold - means) / self.scale)

    def above(self, threshold: float, means: np.ndarray) -> np.ndarray:
        return ndtr((means - threshold) / self.scale)

    def outcome(self, s: int, threshold: float, y: int) -> np.ndarray:
        """Pr[Y_t = y | node] given the outcome threshold of period s."""
        means = self.mean_u[:, s]
        return self.below(threshold, means) if y else self.above(threshold, means)

    def treatment(self, s: int, threshold: float, d: int) -> np.ndarray:
        means = self.mean_v[:, s]
        return self.below(threshold, means) if d else self.above(threshold, means)

    def integrate(self, values: np.ndarray) -> float:
        return float(self.weights @ values)
