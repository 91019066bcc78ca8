"""Closed-form posterior for ``x ~ N(0, I)`` observed exactly through ``y = D x``.

Everything here runs in float64; it is the reference the learned pipeline is
checked against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractError, RngStream


@dataclass(frozen=True)
class LinearGaussianProblem:
    D: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        D = np.atleast_2d(np.asarray(self.D, dtype=np.float64))
        y = np.atleast_1d(np.asarray(self.y, dtype=np.float64))
        if y.shape != (D.shape[0],):
            raise ContractError(f"measurement shape {y.shape} does not match D {D.shape}")
        if np.linalg.matrix_rank(D) < D.shape[0]:
            raise ContractError("D must have full row rank")
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "y", y)

    @property
    def pinv(self) -> np.ndarray:
        D = self.D
        return D.T @ np.linalg.inv(D @ D.T)


def posterior(problem: LinearGaussianProblem):
    """Mean ``D+ y`` and covariance ``I - D+ D``."""
    P = problem.pinv
    n = problem.D.shape[1]
    return P @ problem.y, np.eye(n) - P @ problem.D


def moore_penrose_point(problem: LinearGaussianProblem) -> np.ndarray:
    return problem.pinv @ problem.y


def feasibility_residual(x, problem: LinearGaussianProblem):
    """``||D x - y||`` for one point or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    r = x @ problem.D.T - problem.y
    return np.linalg.norm(r, axis=-1)


def posterior_sampler(problem: LinearGaussianProblem, rng: RngStream, n: int) -> np.ndarray:
    """``n`` draws of ``mean + (I - D+ D) xi``; the covariance is a projector, its own root."""
    mean, cov = posterior(problem)
    xi = rng.numpy().standard_normal((n, len(mean)))
    return mean + xi @ cov.T


def grid_posterior_moments(problem: LinearGaussianProblem, h: float, extent: float = 4.0,
                           n_grid: int = 801):
    """Brute-force moments of the prior on a grid restricted to ``|D x - y| < h``."""
    if problem.D.shape[1] != 2:
        raise ContractError("grid oracle is two-dimensional")
    g = np.linspace(-extent, extent, n_grid)
    X = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    keep = np.all(np.abs(X @ problem.D.T - problem.y) < h, axis=1)
    w = np.exp(-0.5 * np.sum(X[keep] ** 2, axis=1))
    w /= w.sum()
    mean = w @ X[keep]
    dev = X[keep] - mean
    return mean, (dev * w[:, None]).T @ dev
