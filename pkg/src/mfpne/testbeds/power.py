"""Interfering-links power allocation game.

Each link's utility is its expected spectral efficiency log(1 + SINR) under
Rayleigh fading minus a transmit-power penalty. A fidelity-m query averages
raw_costs[m-1] fresh channel realizations, so observation noise is the Monte
Carlo averaging error itself; the surrogate's homoscedastic noise level is
calibrated from a seeded probe of the single-draw variance divided by the
geometric mean of the ladder. The truth oracle is a large fixed-sample Monte
Carlo average cached per (link, profile).

Action grids are stored in dB; the oracle converts to linear scale internally
and the surrogate sees coordinates rescaled to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..game import GameSpec
from ..mogp import KernelParams
from ..policies import PolicyConfig
from .base import Instance, SampledReferenceScorer, normalize_ladder

__all__ = ["PowerParams", "PowerGame", "make_instance"]

_TRUTH_BLOCK = 100_000


@dataclass(frozen=True)
class PowerParams:
    num_links: int = 20
    grid_points: int = 16
    power_db_min: float = -13.0
    power_db_max: float = 23.0
    noise_power_db: float = -20.0
    interference_gain_db: float = -20.0
    penalty: float = 0.1
    raw_costs: tuple[float, ...] = (1, 10, 20, 50, 100)
    truth_samples: int = 10**6
    sigma2_probe_profiles: int = 64
    sigma2_probe_draws: int = 256


def _db_to_linear(db) -> np.ndarray:
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


class PowerGame:
    """Oracle over the fading channels; deterministic truth via seeded caches."""

    def __init__(self, params: PowerParams, seed: int):
        self.params = params
        self.seed = seed
        self.powers_db = np.linspace(
            params.power_db_min, params.power_db_max, params.grid_points
        )
        self.powers_lin = _db_to_linear(self.powers_db)
        self.noise_lin = float(_db_to_linear(params.noise_power_db))
        self.psi_lin = float(_db_to_linear(params.interference_gain_db))
        self._truth_cache: dict[tuple[int, tuple[int, ...]], tuple[float, float]] = {}

    def _spectral_efficiency(
        self, player: int, profile, draws: int, rng: np.random.Generator
    ) -> np.ndarray:
        """Per-realization log(1 + SINR) samples for one link."""
        p = self.powers_lin[np.asarray(profile, dtype=int)]
        n = self.params.num_links
        direct = rng.exponential(1.0, size=draws) * p[player]
        if n > 1:
            others = np.delete(p, player)
            interference = (
                rng.exponential(self.psi_lin, size=(draws, n - 1)) @ others
            )
        else:
            interference = np.zeros(draws)
        return np.log1p(direct / (self.noise_lin + interference))

    def evaluate(self, player, profile, fidelity, rng):
        draws = int(self.params.raw_costs[int(fidelity) - 1])
        se = self._spectral_efficiency(player, profile, draws, rng)
        return float(se.mean() - self.params.penalty * self.powers_lin[int(profile[player])])

    def true_utility_with_stderr(self, player, profile) -> tuple[float, float]:
        """Cached high-sample truth estimate and its Monte Carlo standard error."""
        key = (int(player), tuple(int(i) for i in profile))
        if key not in self._truth_cache:
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, 0x7071, key[0], *key[1]])
            )
            total = self.params.truth_samples
            mean_acc = 0.0
            sq_acc = 0.0
            done = 0
            while done < total:
                block = min(_TRUTH_BLOCK, total - done)
                se = self._spectral_efficiency(key[0], key[1], block, rng)
                mean_acc += float(se.sum())
                sq_acc += float((se * se).sum())
                done += block
            mean = mean_acc / total
            var = max(sq_acc / total - mean * mean, 0.0)
            stderr = float(np.sqrt(var / total))
            value = mean - self.params.penalty * self.powers_lin[key[1][key[0]]]
            self._truth_cache[key] = (value, stderr)
        return self._truth_cache[key]

    def true_utility(self, player, profile):
        return self.true_utility_with_stderr(player, profile)[0]

    def calibrate_sigma2(self) -> float:
        """Single-draw observation variance over a seeded probe, scaled down by
        the geometric mean of the ladder."""
        p = self.params
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x516A]))
        counts = np.full(p.num_links, p.grid_points)
        variances = []
        for _ in range(p.sigma2_probe_profiles):
            profile = tuple(int(rng.integers(0, c)) for c in counts)
            link = int(rng.integers(0, p.num_links))
            se = self._spectral_efficiency(link, profile, p.sigma2_probe_draws, rng)
            variances.append(float(se.var(ddof=1)))
        geo_mean = float(np.exp(np.mean(np.log(p.raw_costs))))
        return float(np.mean(variances)) / geo_mean


def make_instance(
    seed: int,
    budget: float,
    eta: float = 0.4,
    params: PowerParams | None = None,
    delta: float | None = None,
    rkhs_bound: float = 2.0,
    reference_samples: int = 128,
) -> Instance:
    params = params or PowerParams()
    game = PowerGame(params, seed)
    n = params.num_links
    # budgets are configured in raw realization counts; ledger runs normalized
    budget = budget / float(params.raw_costs[-1])
    # surrogate coordinates: dB grid rescaled to [-1, 1]
    lo, hi = params.power_db_min, params.power_db_max
    scaled = (2.0 * (game.powers_db - lo) / (hi - lo) - 1.0)[:, None]
    grids = tuple(scaled.copy() for _ in range(n))
    sigma2 = game.calibrate_sigma2()
    delta = delta if delta is not None else min(0.1, 0.5 / n)
    costs = normalize_ladder(tuple(float(c) for c in params.raw_costs))
    ref_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xEF5]))
    sample = np.column_stack(
        [ref_rng.integers(0, params.grid_points, size=reference_samples) for _ in range(n)]
    )
    probe = GameSpec(
        action_grids=grids,
        num_fidelities=len(costs),
        costs=costs,
        sigma2=sigma2,
        budget=max(budget, n * (costs[0] + 1.0)),
        dissatisfaction_bound=1.0,
        rkhs_bound=rkhs_bound,
        delta=delta,
        eta=eta,
    )
    scorer = SampledReferenceScorer(game, probe, sample)
    worst_seen = max(
        scorer.max_dissatisfaction(tuple(int(i) for i in row)) for row in sample[:32]
    )
    c = max(1.5 * worst_seen, 1e-6)
    m = len(costs)
    surrogate = KernelParams(
        h=0.89, zeta=(0.78,) * (m - 1), rho=(0.768,) * (m - 1), num_fidelities=m
    )
    spec = GameSpec(
        action_grids=grids,
        num_fidelities=m,
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
        policy_config=PolicyConfig(surrogate=surrogate, gamma_points=128),
        metadata={
            "testbed": "power",
            "seed": seed,
            "raw_costs": list(params.raw_costs),
            "budget_scale": float(params.raw_costs[-1]),
            "budget_normalized": budget,
            "psi_db": params.interference_gain_db,
            "penalty": params.penalty,
            "sigma2_calibrated": sigma2,
            "eps_star_reference": scorer.eps_star,
            "dissatisfaction_bound": c,
            "truth_samples": params.truth_samples,
        },
    )
