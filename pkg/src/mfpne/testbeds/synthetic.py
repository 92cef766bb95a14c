"""Random games drawn from the fidelity-cascade prior.

Utility stacks are sampled exactly on the joint grid: the top-fidelity RBF
Gram over a product grid factors across players (Kronecker structure), so one
draw costs a per-player eigendecomposition instead of a joint factorization.
Lower fidelities follow the cascade recursion applied to independent residual
draws, which is the generative model itself.

The two-player configuration mirrors the reference experiment: 128-point
uniform grids on [-1, 1], a two-level ladder with raw costs (1, 8), and the
well-specified / misspecified surrogate pairings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..game import DissatisfactionTable, GameSpec
from ..mogp import KernelParams
from ..policies import PolicyConfig
from .base import Instance, SampledReferenceScorer, normalize_ladder

__all__ = [
    "GEN_PARAMS_N2",
    "SURROGATE_WELL_N2",
    "SURROGATE_MIS_N2",
    "sample_prior_tables",
    "SyntheticGame",
    "make_instance",
    "make_instance_n10",
]

GEN_PARAMS_N2 = KernelParams(h=0.89, zeta=(0.78,), rho=(0.768,), num_fidelities=2)
SURROGATE_WELL_N2 = GEN_PARAMS_N2
SURROGATE_MIS_N2 = KernelParams(h=0.62, zeta=(0.41,), rho=(0.625,), num_fidelities=2)

RAW_COSTS_N2 = (1.0, 8.0)
SIGMA2_N2 = 0.1

GEN_PARAMS_N10 = KernelParams(
    h=0.89, zeta=(0.78,) * 3, rho=(0.768,) * 3, num_fidelities=4
)
RAW_COSTS_N10 = (1.0, 2.0, 4.0, 8.0)


def _axis_factors(coef: float, grids: tuple[np.ndarray, ...]) -> list[np.ndarray]:
    """Per-player sampling factors B with B B^T = RBF Gram over that axis."""
    factors = []
    for g in grids:
        diff = g[:, None, :] - g[None, :, :]
        gram = np.exp(-coef * np.einsum("ijk,ijk->ij", diff, diff))
        vals, vecs = np.linalg.eigh(gram)
        factors.append(vecs * np.sqrt(np.clip(vals, 0.0, None)))
    return factors


def _kron_draw(factors: list[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """One exact zero-mean draw with covariance kron(B_1 B_1^T, ..., B_N B_N^T)."""
    shape = tuple(f.shape[0] for f in factors)
    out = rng.standard_normal(shape)
    for axis, factor in enumerate(factors):
        out = np.moveaxis(np.tensordot(factor, out, axes=([1], [axis])), 0, axis)
    return out


def sample_prior_tables(
    gen: KernelParams,
    grids: tuple[np.ndarray, ...],
    seed: int,
) -> list[dict[int, np.ndarray]]:
    """Per-player fidelity-stacked utility tables over the joint grid.

    Deterministic in seed; one player per child stream so table values do not
    depend on the number of fidelities sampled elsewhere.
    """
    streams = np.random.SeedSequence(seed).spawn(len(grids))
    top_factors = _axis_factors(gen.h, grids)
    resid_factors = [_axis_factors(z, grids) for z in gen.zeta]
    tables: list[dict[int, np.ndarray]] = []
    top = gen.num_fidelities
    for child in streams:
        rng = np.random.default_rng(child)
        stack = {top: _kron_draw(top_factors, rng)}
        for m in range(top - 1, 0, -1):
            r = gen.rho[m - 1]
            resid = _kron_draw(resid_factors[m - 1], rng)
            stack[m] = r * stack[m + 1] + np.sqrt(1.0 - r * r) * resid
        tables.append(stack)
    return tables


class SyntheticGame:
    """Oracle over sampled utility tables; noise is on top of every fidelity."""

    def __init__(self, tables: list[dict[int, np.ndarray]], sigma2: float):
        self.tables = tables
        self.sigma2 = sigma2
        self.top = max(tables[0])

    def true_utility(self, player, profile):
        return float(self.tables[player][self.top][tuple(int(i) for i in profile)])

    def true_utility_table(self, player):
        return self.tables[player][self.top]

    def evaluate(self, player, profile, fidelity, rng):
        base = self.tables[player][int(fidelity)][tuple(int(i) for i in profile)]
        return float(base + rng.normal(0.0, np.sqrt(self.sigma2)))


def make_instance(
    seed: int,
    budget: float,
    eta: float = 0.5,
    well_specified: bool = True,
    grid_points: int = 128,
    delta: float = 0.1,
    rkhs_bound: float = 2.0,
    sigma2: float = SIGMA2_N2,
) -> Instance:
    """Two-player instance with exact truth tables and eps*."""
    grids = tuple(np.linspace(-1.0, 1.0, grid_points)[:, None] for _ in range(2))
    tables = sample_prior_tables(GEN_PARAMS_N2, grids, seed)
    oracle = SyntheticGame(tables, sigma2)
    bound_probe = GameSpec(
        action_grids=grids,
        num_fidelities=2,
        costs=normalize_ladder(RAW_COSTS_N2),
        sigma2=sigma2,
        budget=max(budget, 2 * (normalize_ladder(RAW_COSTS_N2)[0] + 1.0)),
        dissatisfaction_bound=1.0,
        rkhs_bound=rkhs_bound,
        delta=delta,
        eta=eta,
    )
    table = DissatisfactionTable.from_oracle(oracle, bound_probe)
    c = max(1.05 * float(table.f.max()), 1e-6)
    spec = GameSpec(
        action_grids=grids,
        num_fidelities=2,
        costs=normalize_ladder(RAW_COSTS_N2),
        sigma2=sigma2,
        budget=budget,
        dissatisfaction_bound=c,
        rkhs_bound=rkhs_bound,
        delta=delta,
        eta=eta,
    )
    surrogate = SURROGATE_WELL_N2 if well_specified else SURROGATE_MIS_N2
    return Instance(
        spec=spec,
        oracle=oracle,
        scorer=table,
        policy_config=PolicyConfig(surrogate=surrogate),
        metadata={
            "testbed": "synthetic-n2",
            "seed": seed,
            "well_specified": well_specified,
            "raw_costs": list(RAW_COSTS_N2),
            "eps_star": table.eps_star,
            "eps_star_profile": list(table.argmin_profile),
            "dissatisfaction_bound": c,
        },
    )


class _RffComponent:
    """Random-feature function draw approximating one RBF process."""

    def __init__(self, coef: float, dim: int, features: int, rng: np.random.Generator):
        self.omega = rng.normal(0.0, np.sqrt(2.0 * coef), size=(features, dim))
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=features)
        self.weights = rng.standard_normal(features) * np.sqrt(2.0 / features)

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        return np.cos(coords @ self.omega.T + self.phase) @ self.weights


class FunctionalSyntheticGame:
    """Function-backed instance for joint grids too large to materialize.

    Spatial kernels are random-feature approximations; the cascade across
    fidelities is exact given the component draws.
    """

    def __init__(
        self,
        gen: KernelParams,
        spec_grids: tuple[np.ndarray, ...],
        sigma2: float,
        seed: int,
        features: int = 1024,
    ):
        self.gen = gen
        self.grids = spec_grids
        self.sigma2 = sigma2
        dim = sum(g.shape[1] for g in spec_grids)
        streams = np.random.SeedSequence(seed).spawn(len(spec_grids))
        self._players = []
        for child in streams:
            rng = np.random.default_rng(child)
            comps = {"top": _RffComponent(gen.h, dim, features, rng)}
            for m, z in enumerate(gen.zeta, start=1):
                comps[m] = _RffComponent(z, dim, features, rng)
            self._players.append(comps)

    def _coords(self, profile) -> np.ndarray:
        return np.concatenate(
            [np.atleast_1d(self.grids[n][int(i)]) for n, i in enumerate(profile)]
        )

    def utilities_at(self, player: int, coords: np.ndarray) -> dict[int, np.ndarray]:
        """Full fidelity stack at a batch of coordinate rows."""
        comps = self._players[player]
        top = self.gen.num_fidelities
        stack = {top: comps["top"](coords)}
        for m in range(top - 1, 0, -1):
            r = self.gen.rho[m - 1]
            stack[m] = r * stack[m + 1] + np.sqrt(1.0 - r * r) * comps[m](coords)
        return stack

    def true_utility(self, player, profile):
        stack = self.utilities_at(player, self._coords(profile)[None, :])
        return float(stack[self.gen.num_fidelities][0])

    def evaluate(self, player, profile, fidelity, rng):
        stack = self.utilities_at(player, self._coords(profile)[None, :])
        return float(stack[int(fidelity)][0] + rng.normal(0.0, np.sqrt(self.sigma2)))


class _FunctionalScorer:
    """Reference scorer with vectorized own-column sweeps for function games."""

    def __init__(self, game: FunctionalSyntheticGame, spec: GameSpec, samples: int, seed: int):
        self._game = game
        self._spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C0E]))
        counts = spec.action_counts
        profiles = np.column_stack(
            [rng.integers(0, c, size=samples) for c in counts]
        )
        vals = np.array([self.max_dissatisfaction(tuple(p)) for p in profiles])
        best = int(np.argmin(vals))
        self._eps_star = float(vals[best])
        self.reference_profile = tuple(int(i) for i in profiles[best])

    @property
    def eps_star(self) -> float:
        return self._eps_star

    def max_dissatisfaction(self, profile) -> float:
        profile = tuple(int(i) for i in profile)
        spec, game = self._spec, self._game
        top = game.gen.num_fidelities
        worst = -np.inf
        for n in range(spec.num_players):
            count = spec.action_counts[n]
            rows = np.repeat(
                np.concatenate(
                    [np.atleast_1d(spec.action_grids[k][profile[k]]) for k in range(spec.num_players)]
                )[None, :],
                count,
                axis=0,
            )
            col = 0
            for k in range(n):
                col += spec.action_grids[k].shape[1]
            width = spec.action_grids[n].shape[1]
            rows[:, col : col + width] = spec.action_grids[n]
            us = game.utilities_at(n, rows)[top]
            worst = max(worst, float(us.max() - us[profile[n]]))
        return worst


def make_instance_n10(
    seed: int,
    budget: float,
    eta: float = 0.5,
    grid_points: int = 16,
    delta: float = 0.09,
    rkhs_bound: float = 2.0,
    sigma2: float = SIGMA2_N2,
    reference_samples: int = 2048,
) -> Instance:
    """Ten-player, four-fidelity instance scored against a sampled reference."""
    grids = tuple(np.linspace(-1.0, 1.0, grid_points)[:, None] for _ in range(10))
    costs = normalize_ladder(RAW_COSTS_N10)
    game = FunctionalSyntheticGame(GEN_PARAMS_N10, grids, sigma2, seed)
    probe = GameSpec(
        action_grids=grids,
        num_fidelities=4,
        costs=costs,
        sigma2=sigma2,
        budget=max(budget, 10 * (costs[0] + 1.0)),
        dissatisfaction_bound=1.0,
        rkhs_bound=rkhs_bound,
        delta=delta,
        eta=eta,
    )
    scorer = _FunctionalScorer(game, probe, reference_samples, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    probe_profiles = np.column_stack(
        [rng.integers(0, grid_points, size=256) for _ in range(10)]
    )
    max_seen = max(scorer.max_dissatisfaction(tuple(p)) for p in probe_profiles)
    c = max(1.5 * max_seen, 1e-6)
    spec = GameSpec(
        action_grids=grids,
        num_fidelities=4,
        costs=costs,
        sigma2=sigma2,
        budget=budget,
        dissatisfaction_bound=c,
        rkhs_bound=rkhs_bound,
        delta=delta,
        eta=eta,
    )
    return Instance(
        spec=spec,
        oracle=game,
        scorer=scorer,
        policy_config=PolicyConfig(surrogate=GEN_PARAMS_N10, gamma_points=128),
        metadata={
            "testbed": "synthetic-n10",
            "seed": seed,
            "raw_costs": list(RAW_COSTS_N10),
            "eps_star_reference": scorer.eps_star,
            "dissatisfaction_bound": c,
            "reference_samples": reference_samples,
        },
    )
