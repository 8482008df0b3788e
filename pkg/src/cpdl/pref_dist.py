"""Independent per-edge log-normal preference distributions.

All functions broadcast over leading axes: ``mu`` and ``sigma`` may be
(E,) for one context or (B, E) for a batch of contexts, and cost arrays
carry any extra leading sample axes in front of those.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_FLOOR = 1e-3
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class PrefDistParams:
    """Per-edge location ``mu`` and scale ``sigma`` of ``log c``."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape:
            raise ValueError(f"mu {mu.shape} and sigma {sigma.shape} differ in shape")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("distribution parameters must be finite")
        if np.any(sigma <= 0):
            raise ValueError("sigma must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_edges(self) -> int:
        return self.mu.shape[-1]

    def mean(self) -> np.ndarray:
        """E[c] per edge."""
        return np.exp(self.mu + 0.5 * self.sigma**2)

    def sample(self, rng: np.random.Generator, size: int | tuple | None = None) -> np.ndarray:
        return sample(self, rng, size)

    def __getitem__(self, idx) -> "PrefDistParams":
        return PrefDistParams(self.mu[idx], self.sigma[idx])


@dataclass(frozen=True, eq=False)
class PointMass:
    """Degenerate cost distribution concentrated on a fixed cost vector."""

    cost: np.ndarray

    def __post_init__(self):
        cost = np.asarray(self.cost, dtype=np.float64)
        if np.any(cost <= 0) or not np.all(np.isfinite(cost)):
            raise ValueError("point-mass costs must be finite and positive")
        object.__setattr__(self, "cost", cost)

    @property
    def n_edges(self) -> int:
        return self.cost.shape[-1]

    def mean(self) -> np.ndarray:
        return self.cost

    def sample(self, rng: np.random.Generator, size: int | tuple | None = None) -> np.ndarray:
        if size is None:
            return self.cost.copy()
        size = (size,) if np.isscalar(size) else tuple(size)
        return np.broadcast_to(self.cost, size + self.cost.shape).copy()


def sample(params: PrefDistParams, rng: np.random.Generator, size: int | tuple | None = None) -> np.ndarray:
    """Draw ``c = exp(mu + sigma * n)`` with ``n`` standard normal.

    ``size`` prepends sample axes: the result has shape ``size + mu.shape``.
    """
    if size is None:
        shape = params.mu.shape
    else:
        size = (size,) if np.isscalar(size) else tuple(size)
        shape = size + params.mu.shape
    noise = rng.standard_normal(shape)
    return np.exp(params.mu + params.sigma * noise)


def _log_cost(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if np.any(c <= 0):
        raise ValueError("costs must be strictly positive")
    return np.log(c)


def log_density(c: np.ndarray, params: PrefDistParams) -> np.ndarray:
    """Joint log-density of ``c``, summed over the edge axis."""
    logc = _log_cost(c)
    resid = (logc - params.mu) / params.sigma
    terms = -logc - np.log(params.sigma) - _HALF_LOG_2PI - 0.5 * resid**2
    return terms.sum(axis=-1)


def score(c: np.ndarray, params: PrefDistParams) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`log_density` with respect to ``mu`` and ``sigma``.

    Returns per-edge arrays shaped like ``c``.
    """
    resid = _log_cost(c) - params.mu
    var = params.sigma**2
    d_mu = resid / var
    d_sigma = -1.0 / params.sigma + resid**2 / (var * params.sigma)
    return d_mu, d_sigma
