"""Candidate profile sets and the incremental posterior maintained over them.

Policies optimize acquisitions and confidence bounds over a finite candidate
set of joint profiles. Small games use the full joint grid; larger games get a
per-run product-structured sub-grid (random per-player action subsets) so that
best-response maxima along one player's axis stay inside the set and the
posterior can be maintained incrementally in O(t) per appended observation per
candidate column instead of refactorizing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .game import GameSpec
from .mogp import MogpModel, ObservationRecord, append_observation, kernel_matrix

__all__ = ["CandidateSet", "CandidatePosterior", "DEFAULT_MAX_CANDIDATES"]

DEFAULT_MAX_CANDIDATES = 4096


@dataclass(frozen=True)
class CandidateSet:
    """Product-structured set of joint profiles.

    subsets : per-player sorted arrays of global action indices; the candidate
        enumeration is the C-order product, i.e. lexicographic in the global
        indices, which is what every tie-break in the package relies on.
    """

    subsets: tuple[np.ndarray, ...]
    coords: np.ndarray  # (Q, d) concatenated action coordinates
    is_full_grid: bool

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.subsets)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def flat_to_profile(self, flat: int) -> tuple[int, ...]:
        local = np.unravel_index(int(flat), self.shape)
        return tuple(int(self.subsets[n][i]) for n, i in enumerate(local))

    def profile_to_flat(self, profile) -> int:
        local = []
        for n, a in enumerate(profile):
            pos = np.searchsorted(self.subsets[n], int(a))
            if pos >= len(self.subsets[n]) or self.subsets[n][pos] != int(a):
                raise KeyError(f"action {a} of player {n} not in candidate set")
            local.append(pos)
        return int(np.ravel_multi_index(tuple(local), self.shape))

    def player_axis_coords(self, spec: GameSpec, player: int) -> np.ndarray:
        return spec.action_grids[player][self.subsets[player]]


def _product_coords(spec: GameSpec, subsets: tuple[np.ndarray, ...]) -> np.ndarray:
    axes = [spec.action_grids[n][subsets[n]] for n in range(spec.num_players)]
    shape = tuple(len(s) for s in subsets)
    total = int(np.prod(shape))
    out = np.empty((total, spec.profile_dim))
    col = 0
    for n, axis in enumerate(axes):
        d_n = axis.shape[1]
        reps_inner = int(np.prod(shape[n + 1 :])) if n + 1 < len(shape) else 1
        reps_outer = int(np.prod(shape[:n])) if n > 0 else 1
        tiled = np.repeat(axis, reps_inner, axis=0)
        tiled = np.tile(tiled, (reps_outer, 1))
        out[:, col : col + d_n] = tiled
        col += d_n
    return out


def full_grid(spec: GameSpec) -> CandidateSet:
    subsets = tuple(np.arange(c) for c in spec.action_counts)
    return CandidateSet(
        subsets=subsets, coords=_product_coords(spec, subsets), is_full_grid=True
    )


def subset_sizes(action_counts: tuple[int, ...], max_profiles: int) -> tuple[int, ...]:
    """Per-player subset sizes whose product stays within max_profiles.

    Starts at 2 actions each (1 if even that overflows) and bumps players
    round-robin while the product stays within the cap.
    """
    n = len(action_counts)
    sizes = [min(2, c) for c in action_counts]
    if int(np.prod(sizes)) > max_profiles:
        sizes = [1] * n
    while True:
        bumped = False
        for i in range(n):
            if sizes[i] < action_counts[i]:
                trial = int(np.prod(sizes)) // sizes[i] * (sizes[i] + 1)
                if trial <= max_profiles:
                    sizes[i] += 1
                    bumped = True
        if not bumped:
            return tuple(sizes)


def draw_candidate_set(
    spec: GameSpec,
    rng: np.random.Generator,
    max_profiles: int = DEFAULT_MAX_CANDIDATES,
    pools: tuple[np.ndarray, ...] | None = None,
) -> CandidateSet:
    """Full grid when it fits, otherwise a random product sub-grid.

    `pools` optionally restricts each player's eligible actions (e.g. to its
    undominated frontier); subsets are then drawn inside the pool.
    """
    counts = spec.action_counts
    if pools is None:
        pools = tuple(np.arange(c) for c in counts)
    pool_sizes = tuple(len(p) for p in pools)
    if int(np.prod(pool_sizes)) <= max_profiles:
        subsets = tuple(np.sort(np.asarray(p, dtype=int)) for p in pools)
        is_full = all(len(p) == c for p, c in zip(pools, counts))
        return CandidateSet(
            subsets=subsets, coords=_product_coords(spec, subsets), is_full_grid=is_full
        )
    sizes = subset_sizes(pool_sizes, max_profiles)
    subsets = tuple(
        np.sort(rng.choice(pool, size=size, replace=False))
        for pool, size in zip(pools, sizes)
    )
    return CandidateSet(
        subsets=subsets, coords=_product_coords(spec, subsets), is_full_grid=False
    )


class CandidatePosterior:
    """Posterior mean/variance over a fixed candidate set, updated per append.

    Maintains V = L^{-1} K(train, candidates x fidelities) row by row alongside
    the model's Cholesky factor, so variances over the whole set cost O(1) to
    read and O(t * Q * |fidelities|) to update per new observation. Mutable;
    owned by a single run.
    """

    def __init__(self, model: MogpModel, coords: np.ndarray, fidelities: tuple[int, ...]):
        self.coords = np.asarray(coords, dtype=float)
        self.fidelities = tuple(int(f) for f in fidelities)
        self._fid_index = {f: i for i, f in enumerate(self.fidelities)}
        q = self.coords.shape[0]
        self._q = q
        self._col_x = np.tile(self.coords, (len(self.fidelities), 1))
        self._col_m = np.repeat(np.array(self.fidelities, int), q)
        self.model = model
        self._capacity = 64
        self._v = np.empty((self._capacity, q * len(self.fidelities)))
        self._u = np.empty(self._capacity)
        self._count = 0
        self._sumsq = np.zeros(q * len(self.fidelities))
        self._mean_cache: dict[int, np.ndarray] = {}
        if model.num_observations:
            self._rebuild(model)

    def _grow(self, need: int) -> None:
        while self._capacity < need:
            self._capacity *= 2
        v = np.empty((self._capacity, self._v.shape[1]))
        v[: self._count] = self._v[: self._count]
        u = np.empty(self._capacity)
        u[: self._count] = self._u[: self._count]
        self._v, self._u = v, u

    def _rebuild(self, model: MogpModel) -> None:
        """Recompute V/u from scratch against the model's current factor."""
        self.model = model
        t = model.num_observations
        if t > self._capacity:
            self._grow(t)
        self._count = t
        self._mean_cache.clear()
        if t == 0:
            self._sumsq[:] = 0.0
            return
        kstar = kernel_matrix(
            model.params, model.train_x, model.train_m, self._col_x, self._col_m
        )
        self._v[:t] = scipy.linalg.solve_triangular(model.chol, kstar, lower=True)
        self._u[:t] = scipy.linalg.solve_triangular(model.chol, model.train_y, lower=True)
        self._sumsq = np.einsum("ij,ij->j", self._v[:t], self._v[:t])

    def sync(self, model: MogpModel) -> None:
        """Absorb one appended observation (or rebuild on jitter escalation).

        The incremental row formula only needs the leading block of the new
        factor to match the factor the existing rows were solved against;
        Cholesky uniqueness guarantees that whenever the jitter is unchanged.
        """
        t = model.num_observations
        if t == self._count + 1 and model.jitter == self.model.jitter:
            if t + 1 > self._capacity:
                self._grow(t + 1)
            w = model.chol[t - 1, : t - 1]
            s = model.chol[t - 1, t - 1]
            kcol = kernel_matrix(
                model.params,
                model.train_x[t - 1 : t],
                model.train_m[t - 1 : t],
                self._col_x,
                self._col_m,
            )[0]
            vrow = (kcol - w @ self._v[: t - 1]) / s
            self._v[t - 1] = vrow
            self._u[t - 1] = (model.train_y[t - 1] - float(w @ self._u[: t - 1])) / s
            self._sumsq += vrow * vrow
            self._count = t
            self.model = model
            self._mean_cache.clear()
        else:
            self._rebuild(model)

    def _block(self, fidelity: int) -> slice:
        i = self._fid_index[fidelity]
        return slice(i * self._q, (i + 1) * self._q)

    def variances(self, fidelity: int) -> np.ndarray:
        return np.maximum(1.0 - self._sumsq[self._block(fidelity)], 0.0)

    def solved_columns(self, fidelity: int) -> np.ndarray:
        """View of L^{-1} K(train, candidates) for one fidelity block, (t, Q)."""
        return self._v[: self._count, self._block(fidelity)]

    def means(self, fidelity: int) -> np.ndarray:
        if fidelity not in self._mean_cache:
            t = self._count
            if t == 0:
                mu = np.zeros(self._q)
            else:
                mu = self._v[:t, self._block(fidelity)].T @ self._u[:t]
            self._mean_cache[fidelity] = mu
        return self._mean_cache[fidelity]

    def fantasy_append(self, flat_index: int, fidelity: int) -> float:
        """Condition on a hypothetical noisy query at one candidate.

        The observed value never matters for variances; uses y=0. Returns the
        one-step information 0.5*ln(1 + var/sigma2) of the fantasized query.
        Used by greedy information-capacity chains.
        """
        var = float(self.variances(fidelity)[flat_index])
        gain = 0.5 * float(np.log1p(var / self.model.sigma2))
        rec = ObservationRecord(tuple(self.coords[flat_index]), int(fidelity), 0.0)
        self.sync(append_observation(self.model, rec))
        return gain
