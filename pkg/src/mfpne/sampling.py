"""Joint posterior function draws over a candidate set at the top fidelity.

Pathwise conditioning: draw prior sample paths, then shift them by the exact
data correction K(grid, data) (K + s2 I)^-1 (y + noise - prior(data)). Prior
paths come from an exact Cholesky factor on small candidate sets and from a
random-feature expansion of the top RBF kernel on large ones (the correction
stays exact either way). Queried profiles must be members of the candidate
set, which every policy in this package guarantees.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .candidates import CandidatePosterior
from .mogp import KernelParams

__all__ = ["PosteriorSampler"]


class PosteriorSampler:
    def __init__(
        self,
        params: KernelParams,
        coords: np.ndarray,
        rng: np.random.Generator,
        num_features: int = 512,
        exact_limit: int = 512,
    ):
        self.params = params
        self.coords = np.asarray(coords, dtype=float)
        self.rng = rng
        q, d = self.coords.shape
        self.exact = q <= exact_limit
        if self.exact:
            diff = self.coords[:, None, :] - self.coords[None, :, :]
            prior = np.exp(-params.h * np.einsum("ijk,ijk->ij", diff, diff))
            self.prior_chol = np.linalg.cholesky(prior + 1e-10 * np.eye(q))
            self.features = None
        else:
            # exp(-h r^2) has spectral measure N(0, 2h I)
            self.omega = rng.normal(0.0, np.sqrt(2.0 * params.h), size=(num_features, d))
            self.phase = rng.uniform(0.0, 2.0 * np.pi, size=num_features)
            self.features = np.sqrt(2.0 / num_features) * np.cos(
                self.omega @ self.coords.T + self.phase[:, None]
            )
            self.prior_chol = None

    def prior_draws(self, count: int) -> np.ndarray:
        """(count, Q) prior sample paths at the top fidelity."""
        if self.exact:
            z = self.rng.standard_normal((self.prior_chol.shape[0], count))
            return (self.prior_chol @ z).T
        weights = self.rng.standard_normal((count, self.features.shape[0]))
        return weights @ self.features

    def posterior_draws(
        self,
        cache: CandidatePosterior,
        data_flat_indices: np.ndarray,
        count: int,
    ) -> np.ndarray:
        """(count, Q) posterior sample paths given the cache's observations.

        data_flat_indices locates each observation inside the candidate set so
        prior paths can be read off the grid draw instead of being re-sampled.
        """
        model = cache.model
        top = self.params.num_fidelities
        prior = self.prior_draws(count)
        t = model.num_observations
        if t == 0:
            return prior
        prior_at_data = prior[:, data_flat_indices]
        noise = self.rng.normal(0.0, np.sqrt(model.sigma2), size=(count, t))
        resid = model.train_y[None, :] + noise - prior_at_data
        half = scipy.linalg.solve_triangular(model.chol, resid.T, lower=True)
        return prior + (cache.solved_columns(top).T @ half).T
