"""Shared testbed plumbing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..game import GameSpec, TruthScorer, UtilityOracle
from ..policies import PolicyConfig

__all__ = ["Instance", "SampledReferenceScorer", "normalize_ladder"]


@dataclass
class Instance:
    """One playable game: spec, oracle, truth scorer, policy defaults."""

    spec: GameSpec
    oracle: UtilityOracle
    scorer: TruthScorer
    policy_config: PolicyConfig
    metadata: dict = field(default_factory=dict)


def normalize_ladder(raw: tuple[float, ...]) -> tuple[float, ...]:
    """Scale a raw cost ladder so the top fidelity costs exactly 1."""
    top = raw[-1]
    if top <= 0:
        raise ValueError("top-fidelity cost must be positive")
    return tuple(c / top for c in raw)


class SampledReferenceScorer:
    """Reference scoring for games too large to sweep exhaustively.

    eps* is replaced by the best max-dissatisfaction over a fixed seeded
    profile sample; callers treat downstream simple regrets as floored at
    zero. max_dissatisfaction stays exact per profile (own-column sweeps are
    always affordable).
    """

    def __init__(self, oracle: UtilityOracle, spec: GameSpec, sample_profiles: np.ndarray):
        self._oracle = oracle
        self._spec = spec
        best = np.inf
        best_profile = None
        for row in sample_profiles:
            val = self.max_dissatisfaction(tuple(int(i) for i in row))
            if val < best:
                best = val
                best_profile = tuple(int(i) for i in row)
        self._eps_star = float(best)
        self.reference_profile = best_profile

    @property
    def eps_star(self) -> float:
        return self._eps_star

    def max_dissatisfaction(self, profile) -> float:
        profile = tuple(int(i) for i in profile)
        worst = -np.inf
        for n in range(self._spec.num_players):
            here = self._oracle.true_utility(n, profile)
            best = -np.inf
            for alt in range(self._spec.action_counts[n]):
                candidate = profile[:n] + (alt,) + profile[n + 1 :]
                best = max(best, self._oracle.true_utility(n, candidate))
            worst = max(worst, best - here)
        return float(worst)
