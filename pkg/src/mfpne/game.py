"""Game instances over discretized action spaces: truth scoring and regret math.

Profiles are tuples of per-player action indices into the per-player grids; the
coordinate vector fed to surrogates is the concatenation of the selected
actions. All truth-side quantities (dissatisfaction, eps*, rewards, regrets)
live here and are never visible to the optimization policies.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

__all__ = [
    "GameSpec",
    "UtilityOracle",
    "TruthScorer",
    "DissatisfactionTable",
    "dissatisfaction",
    "max_dissatisfaction",
    "epsilon_star",
    "reward",
    "cumulative_regret",
    "simple_pne_regret",
    "BudgetIntegrityError",
]

# Largest joint grid we are willing to sweep exhaustively.
DENSE_PROFILE_LIMIT = 2**21


class BudgetIntegrityError(RuntimeError):
    """A spend ledger claims more than the configured budget."""


@dataclass(frozen=True)
class GameSpec:
    """Full problem instance: players, grids, fidelity ladder, budget, bounds.

    action_grids : per-player arrays of shape (A_n, d_n); row order defines the
        lexicographic tie-break order used everywhere.
    costs        : per-fidelity query costs, nondecreasing with costs[-1] == 1.
    budget       : total query budget Lambda.
    dissatisfaction_bound : constant C upper-bounding every player's
        dissatisfaction on the grid.
    rkhs_bound   : norm bound B entering the confidence scaling.
    delta        : confidence parameter, in (0, 1/N).
    eta          : evaluation-trigger threshold, in [1/N, 1].
    """

    action_grids: tuple[np.ndarray, ...]
    num_fidelities: int
    costs: tuple[float, ...]
    sigma2: float
    budget: float
    dissatisfaction_bound: float
    rkhs_bound: float
    delta: float
    eta: float

    def __post_init__(self):
        n = len(self.action_grids)
        if n < 1:
            raise ValueError("need at least one player")
        if len(self.costs) != self.num_fidelities:
            raise ValueError("one cost per fidelity level required")
        if any(b < a for a, b in zip(self.costs, self.costs[1:])):
            raise ValueError("costs must be nondecreasing")
        if abs(self.costs[-1] - 1.0) > 1e-12:
            raise ValueError("top-fidelity cost must be exactly 1")
        if self.costs[0] <= 0:
            raise ValueError("costs must be positive")
        if self.sigma2 <= 0:
            raise ValueError("observation noise variance must be positive")
        min_affordable = n * (self.costs[0] + 1.0)
        if self.budget < min_affordable:
            raise ValueError(
                f"budget {self.budget} cannot afford one exploration plus one "
                f"evaluation step (needs {min_affordable})"
            )
        if not 0.0 < self.delta < 1.0 / n:
            raise ValueError(f"delta must lie in (0, 1/{n})")
        if not 1.0 / n <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [1/{n}, 1]")
        if self.dissatisfaction_bound <= 0:
            raise ValueError("dissatisfaction bound C must be positive")

    @property
    def num_players(self) -> int:
        return len(self.action_grids)

    @property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(g.shape[0] for g in self.action_grids)

    @property
    def num_profiles(self) -> int:
        return int(np.prod([g.shape[0] for g in self.action_grids], dtype=object))

    @property
    def profile_dim(self) -> int:
        return sum(g.shape[1] for g in self.action_grids)

    def profile_coords(self, profile: Sequence[int]) -> np.ndarray:
        return np.concatenate(
            [np.atleast_1d(self.action_grids[n][int(i)]) for n, i in enumerate(profile)]
        )


class UtilityOracle(Protocol):
    """Black-box utility access for one game instance.

    evaluate() is the only surface policies may touch; true_utility() exists
    for scoring and test oracles.
    """

    def evaluate(
        self, player: int, profile: Sequence[int], fidelity: int, rng: np.random.Generator
    ) -> float: ...

    def true_utility(self, player: int, profile: Sequence[int]) -> float: ...


class TruthScorer(Protocol):
    """Scoring interface: exact or reference dissatisfaction machinery."""

    @property
    def eps_star(self) -> float: ...

    def max_dissatisfaction(self, profile: Sequence[int]) -> float: ...


def dissatisfaction(
    oracle: UtilityOracle, spec: GameSpec, player: int, profile: Sequence[int]
) -> float:
    """Best-response utility gap of one player at one profile (exhaustive)."""
    profile = tuple(int(i) for i in profile)
    here = oracle.true_utility(player, profile)
    best = -np.inf
    for alt in range(spec.action_counts[player]):
        candidate = profile[:player] + (alt,) + profile[player + 1 :]
        best = max(best, oracle.true_utility(player, candidate))
    return best - here


def max_dissatisfaction(
    oracle: UtilityOracle, spec: GameSpec, profile: Sequence[int]
) -> float:
    return max(
        dissatisfaction(oracle, spec, n, profile) for n in range(spec.num_players)
    )


def _true_tables(oracle: UtilityOracle, spec: GameSpec) -> list[np.ndarray]:
    """Dense per-player truth tables over the joint grid."""
    shape = spec.action_counts
    fast = getattr(oracle, "true_utility_table", None)
    if fast is not None:
        return [np.asarray(fast(n), dtype=float).reshape(shape) for n in range(spec.num_players)]
    tables = []
    for n in range(spec.num_players):
        t = np.empty(shape)
        for profile in np.ndindex(*shape):
            t[profile] = oracle.true_utility(n, profile)
        tables.append(t)
    return tables


def dissatisfaction_tables(tables: list[np.ndarray]) -> np.ndarray:
    """Per-player dissatisfaction arrays from dense utility tables."""
    out = np.empty((len(tables),) + tables[0].shape)
    for n, t in enumerate(tables):
        out[n] = np.max(t, axis=n, keepdims=True) - t
    return out


def epsilon_star(oracle: UtilityOracle, spec: GameSpec) -> tuple[float, tuple[int, ...]]:
    """Smallest achievable max-dissatisfaction over the grid and its argmin.

    Exhaustive sweep; ties resolve to the lowest lexicographic profile index
    (C-order scan of the joint grid).
    """
    if spec.num_profiles > DENSE_PROFILE_LIMIT:
        raise ValueError(
            f"joint grid with {spec.num_profiles} profiles exceeds the exhaustive "
            f"sweep limit {DENSE_PROFILE_LIMIT}"
        )
    f = dissatisfaction_tables(_true_tables(oracle, spec))
    worst = f.max(axis=0)
    flat = int(np.argmin(worst))
    profile = tuple(int(i) for i in np.unravel_index(flat, worst.shape))
    return float(worst.flat[flat]), profile


@dataclass(frozen=True)
class DissatisfactionTable:
    """Dense truth-side dissatisfaction of every player at every grid profile."""

    f: np.ndarray  # (N, *grid_shape)
    eps_star: float
    argmin_profile: tuple[int, ...]

    @classmethod
    def from_oracle(cls, oracle: UtilityOracle, spec: GameSpec) -> "DissatisfactionTable":
        if spec.num_profiles > DENSE_PROFILE_LIMIT:
            raise ValueError("grid too large for a dense dissatisfaction table")
        f = dissatisfaction_tables(_true_tables(oracle, spec))
        worst = f.max(axis=0)
        flat = int(np.argmin(worst))
        profile = tuple(int(i) for i in np.unravel_index(flat, worst.shape))
        if np.min(f) < -1e-9:
            raise AssertionError("dissatisfaction must be nonnegative")
        return cls(f=f, eps_star=float(worst.flat[flat]), argmin_profile=profile)

    def max_dissatisfaction(self, profile: Sequence[int]) -> float:
        idx = tuple(int(i) for i in profile)
        return float(self.f[(slice(None),) + idx].max())

    def player_dissatisfaction(self, player: int, profile: Sequence[int]) -> float:
        return float(self.f[(player,) + tuple(int(i) for i in profile)])

    def to_csv(self, path) -> None:
        """Debug dump: one row per profile with per-player dissatisfactions."""
        n = self.f.shape[0]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["profile"] + [f"f_{i}" for i in range(n)] + ["eps_star"])
            for profile in np.ndindex(*self.f.shape[1:]):
                row = ["/".join(map(str, profile))]
                row += [f"{self.f[(i,) + profile]:.12g}" for i in range(n)]
                row += [f"{self.eps_star:.12g}"]
                writer.writerow(row)


def reward(
    spec: GameSpec,
    scorer: TruthScorer,
    profile: Sequence[int],
    fidelity_vector: Sequence[int],
) -> float:
    """Per-step reward: normalized dissatisfaction improvement on evaluation
    steps (all players at the top fidelity), zero on exploration steps."""
    if all(int(m) == spec.num_fidelities for m in fidelity_vector):
        c = spec.dissatisfaction_bound
        return (c - scorer.max_dissatisfaction(profile)) / c
    return 0.0


class EpisodeCost(Protocol):
    """What regret accounting needs from an episode record."""

    @property
    def spend(self) -> float: ...

    @property
    def final_eps(self) -> float: ...


def cumulative_regret(
    spec: GameSpec, scorer: TruthScorer, episodes: Iterable[EpisodeCost]
) -> tuple[float, list[float]]:
    """Total regret and its per-episode decomposition.

    Each episode contributes (spend/N)(1 - eps*/C) - (1 - eps_j/C), the gap to
    an idealized optimizer that spends the same budget on eps*-attaining
    evaluations only.
    """
    n = spec.num_players
    c = spec.dissatisfaction_bound
    ideal = 1.0 - scorer.eps_star / c
    per_episode = []
    total_spend = 0.0
    for ep in episodes:
        total_spend += ep.spend
        per_episode.append((ep.spend / n) * ideal - (1.0 - ep.final_eps / c))
    if total_spend > spec.budget + 1e-9:
        raise BudgetIntegrityError(
            f"episodes spend {total_spend} beyond the budget {spec.budget}"
        )
    return float(sum(per_episode)), per_episode


def simple_pne_regret(scorer: TruthScorer, visited: Sequence[Sequence[int]]) -> float:
    """Gap between the best max-dissatisfaction among visited evaluation
    profiles and eps*. Nonnegative for exact scorers."""
    if len(visited) == 0:
        raise ValueError("visited profile set must be nonempty")
    best = min(scorer.max_dissatisfaction(p) for p in visited)
    return max(best - scorer.eps_star, 0.0)
