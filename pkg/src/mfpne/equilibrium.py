"""Evaluation-phase machinery: confidence intervals, profile selection, capacity.

Works on per-player arrays laid out over a product-structured candidate grid
(player n's own actions vary along axis n), so every inner best-response
maximum is an exact axis reduction. Profiles returned by the selection
operations are local index tuples into that grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .candidates import CandidatePosterior
from .game import GameSpec
from .mogp import MogpModel, kernel_matrix

__all__ = [
    "ConfidenceState",
    "confidence_scale",
    "compute_beta",
    "estimate_gamma",
    "greedy_capacity_chain",
    "build_confidence_state",
    "reported_profile",
    "exploring_profile",
    "final_evaluation_profile",
]


def confidence_scale(rkhs_bound: float, sigma2: float, delta: float, gamma: float) -> float:
    """Interval width multiplier: B + 4*sigma*sqrt(1 + gamma + ln(1/delta))."""
    if gamma < 0:
        raise ValueError("information capacity must be nonnegative")
    return rkhs_bound + 4.0 * math.sqrt(sigma2) * math.sqrt(
        1.0 + gamma + math.log(1.0 / delta)
    )


def compute_beta(spec: GameSpec, gamma_nj: float) -> float:
    return confidence_scale(spec.rkhs_bound, spec.sigma2, spec.delta, gamma_nj)


def greedy_capacity_chain(
    prior_cross: np.ndarray,
    solved_columns: np.ndarray,
    variances: np.ndarray,
    sigma2: float,
    horizon: int,
) -> float:
    """Greedy information capacity via rank-1 variance updates.

    prior_cross    : (Q, Q) prior covariance among the chain's grid points at
                     the top fidelity.
    solved_columns : (t, Q) whitened training cross-covariances L^-1 K(D, grid)
                     conditioning the chain on the current dataset.
    variances      : (Q,) current posterior variances at the grid points.

    Each step queries (in fantasy) the highest-variance point, accumulates its
    one-step information, and downdates variances exactly; equivalent to
    conditioning on the fantasized noisy observation.
    """
    var = np.array(variances, dtype=float)
    q = var.shape[0]
    phi = np.empty((horizon, q))
    total = 0.0
    for step in range(horizon):
        best = int(np.argmax(var))
        v_best = max(float(var[best]), 0.0)
        total += 0.5 * float(np.log1p(v_best / sigma2))
        cross = prior_cross[:, best].copy()
        if solved_columns.shape[0]:
            cross -= solved_columns.T @ solved_columns[:, best]
        if step:
            cross -= phi[:step].T @ phi[:step, best]
        phi[step] = cross / np.sqrt(v_best + sigma2)
        var = np.maximum(var - phi[step] * phi[step], 0.0)
    return total


def estimate_gamma(model: MogpModel, coords: np.ndarray, horizon: int) -> float:
    """Greedy estimate of the information capacity over `horizon` queries.

    Repeatedly fantasizes a top-fidelity query at the highest-variance point of
    `coords` (variance-only conditioning; the capacity never depends on the
    observed values) and accumulates the one-step information gains.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    top = model.params.num_fidelities
    scratch = CandidatePosterior(model, coords, fidelities=(top,))
    mvec = np.full(coords.shape[0], top, dtype=int)
    prior_cross = kernel_matrix(model.params, coords, mvec, coords, mvec)
    return greedy_capacity_chain(
        prior_cross,
        scratch.solved_columns(top),
        scratch.variances(top),
        model.sigma2,
        horizon,
    )


@dataclass(frozen=True)
class ConfidenceState:
    """Per-player utility and dissatisfaction bands over the candidate grid.

    Arrays have shape (N, *grid_shape). Midpoints of [u_lo, u_hi] are exactly
    the posterior means; dissatisfaction bands combine own-axis maxima of the
    optimistic/pessimistic utilities.
    """

    u_lo: np.ndarray
    u_hi: np.ndarray
    f_lo: np.ndarray
    f_hi: np.ndarray
    var_top: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return self.u_lo.shape[1:]


def build_confidence_state(
    means: np.ndarray,
    variances: np.ndarray,
    beta: np.ndarray,
    gamma: np.ndarray | None = None,
) -> ConfidenceState:
    """Bands from top-fidelity posterior summaries on the candidate grid.

    means/variances: (N, *grid_shape); beta: (N,). For each player n,
    f_lo[n](x) = max_{x_n'} u_lo[n](x_n', x_-n) - u_hi[n](x) and f_hi[n] the
    mirrored combination; inner maxima are exact over the grid axes.
    """
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    n = means.shape[0]
    beta = np.asarray(beta, dtype=float)
    sds = np.sqrt(np.maximum(variances, 0.0))
    u_lo = means - beta.reshape((n,) + (1,) * (means.ndim - 1)) * sds
    u_hi = means + beta.reshape((n,) + (1,) * (means.ndim - 1)) * sds
    f_lo = np.empty_like(means)
    f_hi = np.empty_like(means)
    for player in range(n):
        axis = player  # own actions vary along this grid axis
        f_lo[player] = np.max(u_lo[player], axis=axis, keepdims=True) - u_hi[player]
        f_hi[player] = np.max(u_hi[player], axis=axis, keepdims=True) - u_lo[player]
    return ConfidenceState(
        u_lo=u_lo,
        u_hi=u_hi,
        f_lo=f_lo,
        f_hi=f_hi,
        var_top=variances,
        beta=beta,
        gamma=np.zeros(n) if gamma is None else np.asarray(gamma, dtype=float),
    )


def reported_profile(state: ConfidenceState) -> tuple[int, ...]:
    """Grid argmin of the worst-case optimistic dissatisfaction.

    Ties resolve to the lowest flat (lexicographic) grid index.
    """
    worst = state.f_lo.max(axis=0)
    flat = int(np.argmin(worst))
    return tuple(int(i) for i in np.unravel_index(flat, worst.shape))


def exploring_profile(
    state: ConfidenceState, reported: tuple[int, ...]
) -> tuple[int, tuple[int, ...]]:
    """Worst player under the reported profile and its optimistic deviation.

    Returns (player, profile) where the profile replaces that player's action
    by the argmax of its upper utility bound with opponents fixed.
    """
    worst_player = int(np.argmax(state.f_hi[(slice(None),) + reported]))
    sl = list(reported)
    sl[worst_player] = slice(None)
    own_axis_u_hi = state.u_hi[(worst_player,) + tuple(sl)]
    best_action = int(np.argmax(own_axis_u_hi))
    profile = list(reported)
    profile[worst_player] = best_action
    return worst_player, tuple(profile)


def final_evaluation_profile(
    state: ConfidenceState,
    reported: tuple[int, ...],
    exploring: tuple[int, ...],
) -> tuple[int, ...]:
    """The more uncertain of the two candidates by worst-player top-fidelity
    posterior variance; ties go to the reported profile."""
    var_rep = float(state.var_top[(slice(None),) + reported].max())
    var_exp = float(state.var_top[(slice(None),) + exploring].max())
    return exploring if var_exp > var_rep else reported
