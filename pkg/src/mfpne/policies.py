"""Full optimization policies emitting uniform run logs.

Three policies share one episode loop:

- mf-ucb-pne: information-per-cost exploration at low fidelities, then one
  optimism-guided evaluation step per episode.
- ucb-pne: the evaluation step only, every step, all players at top fidelity.
- pe: picks the profile most often a grid equilibrium across posterior sample
  draws, every step at top fidelity.

Runs are deterministic given (spec, oracle instance, seed): all randomness
flows through named child streams of the seed, and every tie-break is by
lowest lexicographic index.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .acquisition import (
    COST_UNIT,
    BudgetLedger,
    DecisionPair,
    PlayerState,
    StopReason,
    run_exploration_phase,
)
from .candidates import CandidatePosterior, CandidateSet, draw_candidate_set
from .equilibrium import (
    build_confidence_state,
    compute_beta,
    exploring_profile,
    final_evaluation_profile,
    greedy_capacity_chain,
    reported_profile,
)
from .mogp import kernel_matrix
from .game import GameSpec, TruthScorer, UtilityOracle, cumulative_regret
from .mogp import KernelParams, ObservationRecord, empty_model
from .sampling import PosteriorSampler

__all__ = [
    "PolicyConfig",
    "EpisodeLog",
    "RunResult",
    "run_mf_ucb_pne",
    "run_ucb_pne",
    "run_pe",
    "run_policy",
    "returned_solution",
    "POLICIES",
]


@dataclass(frozen=True)
class PolicyConfig:
    """Surrogate and estimator knobs shared by all policies on a testbed.

    candidate_pools optionally restricts the per-player actions that candidate
    sub-grids may draw from (identical for every policy on an instance).
    """

    surrogate: KernelParams
    max_candidates: int = 4096
    gamma_points: int = 512
    pe_samples: int = 64
    pe_features: int = 512
    pe_exact_limit: int = 512
    candidate_pools: tuple | None = None


@dataclass
class EpisodeLog:
    """One episode: exploration sequence, final evaluation, spend, truth score."""

    index: int
    exploration: list[DecisionPair]
    exploration_observations: list[list[float]]
    stop_reason: str
    final_profile: tuple[int, ...]
    final_observations: list[float]
    spend_units: int
    final_eps: float
    reported: tuple[int, ...] | None = None
    exploring: tuple[int, ...] | None = None
    beta: list[float] = field(default_factory=list)
    gamma: list[float] = field(default_factory=list)

    @property
    def spend(self) -> float:
        return self.spend_units / COST_UNIT

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "exploration": [
                {"profile": list(d.profile), "fidelities": list(d.fidelities)}
                for d in self.exploration
            ],
            "exploration_observations": self.exploration_observations,
            "stop_reason": self.stop_reason,
            "final_profile": list(self.final_profile),
            "final_observations": self.final_observations,
            "spend": self.spend,
            "final_eps": self.final_eps,
            "reported": list(self.reported) if self.reported else None,
            "exploring": list(self.exploring) if self.exploring else None,
            "beta": self.beta,
            "gamma": self.gamma,
        }


@dataclass
class RunResult:
    policy: str
    seed: int
    episodes: list[EpisodeLog]
    eps_star: float
    simple_regret_trace: list[float]
    cum_regret: float
    cum_regret_per_episode: list[float]
    reward_total: float
    spend_units: int
    degenerate: bool
    candidate_subsets: list[list[int]]
    wallclock_ms: float = 0.0

    @property
    def spend(self) -> float:
        return self.spend_units / COST_UNIT

    @property
    def simple_regret(self) -> float:
        return self.simple_regret_trace[-1] if self.simple_regret_trace else float("nan")

    def decision_trace(self) -> list[tuple]:
        """Logged decisions only; used for determinism and equivalence checks."""
        out = []
        for ep in self.episodes:
            for d in ep.exploration:
                out.append(("explore", d.profile, d.fidelities))
            out.append(("evaluate", ep.final_profile))
        return out

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "seed": self.seed,
            "eps_star": self.eps_star,
            "episodes": [ep.to_dict() for ep in self.episodes],
            "simple_regret_trace": self.simple_regret_trace,
            "cum_regret": self.cum_regret,
            "cum_regret_per_episode": self.cum_regret_per_episode,
            "reward_total": self.reward_total,
            "spend": self.spend,
            "degenerate": self.degenerate,
            "candidate_subsets": self.candidate_subsets,
            "wallclock_ms": self.wallclock_ms,
        }


@dataclass
class _Runtime:
    spec: GameSpec
    oracle: UtilityOracle
    scorer: TruthScorer
    config: PolicyConfig
    cset: CandidateSet
    players: list[PlayerState]
    ledger: BudgetLedger
    noise_rngs: list[np.random.Generator]
    pe_rng: np.random.Generator
    gamma_flat: np.ndarray
    gamma_prior_cross: np.ndarray | None = None

    def local_to_profile(self, local: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(int(self.cset.subsets[n][i]) for n, i in enumerate(local))

    def capacity_estimate(self, player: PlayerState, horizon: int) -> float:
        """Greedy capacity over the run's gamma subgrid, reusing the player's
        incrementally maintained posterior columns."""
        top = self.spec.num_fidelities
        if self.gamma_prior_cross is None:
            coords = self.cset.coords[self.gamma_flat]
            mvec = np.full(len(self.gamma_flat), top, dtype=int)
            self.gamma_prior_cross = kernel_matrix(
                self.config.surrogate, coords, mvec, coords, mvec
            )
        solved = np.ascontiguousarray(
            player.cache.solved_columns(top)[:, self.gamma_flat]
        )
        variances = player.cache.variances(top)[self.gamma_flat]
        return greedy_capacity_chain(
            self.gamma_prior_cross, solved, variances, self.spec.sigma2, horizon
        )


def _make_runtime(
    spec: GameSpec,
    oracle: UtilityOracle,
    scorer: TruthScorer,
    seed: int,
    config: PolicyConfig,
    fidelities: tuple[int, ...],
) -> _Runtime:
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(spec.num_players + 3)
    noise_rngs = [np.random.default_rng(c) for c in children[: spec.num_players]]
    cand_rng = np.random.default_rng(children[spec.num_players])
    pe_rng = np.random.default_rng(children[spec.num_players + 1])
    gamma_rng = np.random.default_rng(children[spec.num_players + 2])
    cset = draw_candidate_set(
        spec, cand_rng, config.max_candidates, pools=config.candidate_pools
    )
    if cset.size <= config.gamma_points:
        gamma_flat = np.arange(cset.size)
    else:
        gamma_flat = np.sort(
            gamma_rng.choice(cset.size, size=config.gamma_points, replace=False)
        )
    players = []
    for _ in range(spec.num_players):
        model = empty_model(config.surrogate, spec.sigma2, spec.profile_dim)
        cache = CandidatePosterior(model, cset.coords, fidelities=fidelities)
        players.append(PlayerState(model=model, cache=cache))
    return _Runtime(
        spec=spec,
        oracle=oracle,
        scorer=scorer,
        config=config,
        cset=cset,
        players=players,
        ledger=BudgetLedger.for_spec(spec),
        noise_rngs=noise_rngs,
        pe_rng=pe_rng,
        gamma_flat=gamma_flat,
    )


def _query_top_fidelity(rt: _Runtime, profile: tuple[int, ...]) -> list[float]:
    """Evaluation query: every player at the top fidelity, cost N units."""
    top = rt.spec.num_fidelities
    coords = rt.spec.profile_coords(profile)
    obs = []
    for n, player in enumerate(rt.players):
        y = rt.oracle.evaluate(n, profile, top, rt.noise_rngs[n])
        player.absorb(ObservationRecord(tuple(coords), top, float(y)))
        obs.append(float(y))
    rt.ledger.charge(rt.spec.num_players * COST_UNIT)
    return obs


def _ucb_evaluation_profile(rt: _Runtime) -> tuple[tuple[int, ...], dict]:
    """Confidence-band selection of the episode's evaluation profile."""
    spec = rt.spec
    top = spec.num_fidelities
    shape = rt.cset.shape
    n = spec.num_players
    means = np.empty((n,) + shape)
    variances = np.empty((n,) + shape)
    betas = np.empty(n)
    gammas = np.empty(n)
    for i, player in enumerate(rt.players):
        horizon = player.model.num_observations + 1
        gammas[i] = rt.capacity_estimate(player, horizon)
        betas[i] = compute_beta(spec, gammas[i])
        means[i] = player.cache.means(top).reshape(shape)
        variances[i] = player.cache.variances(top).reshape(shape)
    state = build_confidence_state(means, variances, betas, gammas)
    reported = reported_profile(state)
    _, exploring = exploring_profile(state, reported)
    final_local = final_evaluation_profile(state, reported, exploring)
    info = {
        "reported": rt.local_to_profile(reported),
        "exploring": rt.local_to_profile(exploring),
        "beta": [float(b) for b in betas],
        "gamma": [float(g) for g in gammas],
    }
    return rt.local_to_profile(final_local), info


def pne_sample_scores(draws_per_player: list[np.ndarray]) -> np.ndarray:
    """Fraction of joint draws in which each grid profile is an equilibrium.

    draws_per_player[n] has shape (S, *grid_shape); a profile counts for one
    draw when every player's sampled utility there attains its own-axis max.
    """
    count = draws_per_player[0].shape[0]
    shape = draws_per_player[0].shape[1:]
    is_pne = np.ones((count,) + shape, dtype=bool)
    for n, draws in enumerate(draws_per_player):
        is_pne &= draws == np.max(draws, axis=n + 1, keepdims=True)
    return is_pne.mean(axis=0)


def _pe_evaluation_profile(rt: _Runtime, sampler: PosteriorSampler, data_flat: list[int]) -> tuple[int, ...]:
    """Profile most often a grid equilibrium across posterior sample draws."""
    shape = rt.cset.shape
    count = rt.config.pe_samples
    draws = [
        sampler.posterior_draws(
            player.cache, np.asarray(data_flat, dtype=int), count
        ).reshape((count,) + shape)
        for player in rt.players
    ]
    score = pne_sample_scores(draws)
    flat = int(np.argmax(score))
    local = tuple(int(i) for i in np.unravel_index(flat, shape))
    return rt.local_to_profile(local)


def _finalize(
    policy: str,
    rt: _Runtime,
    episodes: list[EpisodeLog],
    seed: int,
    t0: float,
) -> RunResult:
    spec, scorer = rt.spec, rt.scorer
    trace = []
    best = np.inf
    reward_total = 0.0
    for ep in episodes:
        best = min(best, ep.final_eps)
        trace.append(max(best - scorer.eps_star, 0.0))
        reward_total += (spec.dissatisfaction_bound - ep.final_eps) / spec.dissatisfaction_bound
    if episodes:
        total, per_episode = cumulative_regret(spec, scorer, episodes)
    else:
        total, per_episode = 0.0, []
    assert rt.ledger.spent_total_units <= rt.ledger.budget_units
    return RunResult(
        policy=policy,
        seed=seed,
        episodes=episodes,
        eps_star=scorer.eps_star,
        simple_regret_trace=trace,
        cum_regret=total,
        cum_regret_per_episode=per_episode,
        reward_total=reward_total,
        spend_units=rt.ledger.spent_total_units,
        degenerate=not episodes,
        candidate_subsets=[[int(i) for i in s] for s in rt.cset.subsets],
        wallclock_ms=(time.perf_counter() - t0) * 1e3,
    )


def run_mf_ucb_pne(
    spec: GameSpec,
    oracle: UtilityOracle,
    scorer: TruthScorer,
    seed: int,
    config: PolicyConfig,
    _initial_spent_units: int = 0,
) -> RunResult:
    t0 = time.perf_counter()
    fidelities = tuple(range(1, spec.num_fidelities + 1))
    rt = _make_runtime(spec, oracle, scorer, seed, config, fidelities)
    rt.ledger.spent_total_units = _initial_spent_units
    episodes: list[EpisodeLog] = []
    n_units = spec.num_players * COST_UNIT
    j = 0
    while rt.ledger.remaining() >= n_units:
        rt.ledger.start_episode()
        outcome = run_exploration_phase(
            rt.players, spec, rt.cset, rt.ledger, rt.oracle, rt.noise_rngs
        )
        final_profile, info = _ucb_evaluation_profile(rt)
        obs = _query_top_fidelity(rt, final_profile)
        episodes.append(
            EpisodeLog(
                index=j,
                exploration=outcome.sequence,
                exploration_observations=outcome.observations,
                stop_reason=outcome.stop_reason.value,
                final_profile=final_profile,
                final_observations=obs,
                spend_units=rt.ledger.spent_episode_units,
                final_eps=rt.scorer.max_dissatisfaction(final_profile),
                reported=info["reported"],
                exploring=info["exploring"],
                beta=info["beta"],
                gamma=info["gamma"],
            )
        )
        j += 1
    return _finalize("mf-ucb-pne", rt, episodes, seed, t0)


def run_ucb_pne(
    spec: GameSpec,
    oracle: UtilityOracle,
    scorer: TruthScorer,
    seed: int,
    config: PolicyConfig,
    _initial_spent_units: int = 0,
) -> RunResult:
    t0 = time.perf_counter()
    top = spec.num_fidelities
    rt = _make_runtime(spec, oracle, scorer, seed, config, fidelities=(top,))
    rt.ledger.spent_total_units = _initial_spent_units
    episodes: list[EpisodeLog] = []
    n_units = spec.num_players * COST_UNIT
    j = 0
    while rt.ledger.remaining() >= n_units:
        rt.ledger.start_episode()
        final_profile, info = _ucb_evaluation_profile(rt)
        obs = _query_top_fidelity(rt, final_profile)
        episodes.append(
            EpisodeLog(
                index=j,
                exploration=[],
                exploration_observations=[[] for _ in rt.players],
                stop_reason="evaluation_only",
                final_profile=final_profile,
                final_observations=obs,
                spend_units=rt.ledger.spent_episode_units,
                final_eps=rt.scorer.max_dissatisfaction(final_profile),
                reported=info["reported"],
                exploring=info["exploring"],
                beta=info["beta"],
                gamma=info["gamma"],
            )
        )
        j += 1
    return _finalize("ucb-pne", rt, episodes, seed, t0)


def run_pe(
    spec: GameSpec,
    oracle: UtilityOracle,
    scorer: TruthScorer,
    seed: int,
    config: PolicyConfig,
    _initial_spent_units: int = 0,
) -> RunResult:
    t0 = time.perf_counter()
    top = spec.num_fidelities
    rt = _make_runtime(spec, oracle, scorer, seed, config, fidelities=(top,))
    rt.ledger.spent_total_units = _initial_spent_units
    sampler = PosteriorSampler(
        config.surrogate,
        rt.cset.coords,
        rt.pe_rng,
        num_features=config.pe_features,
        exact_limit=config.pe_exact_limit,
    )
    episodes: list[EpisodeLog] = []
    data_flat: list[int] = []
    n_units = spec.num_players * COST_UNIT
    j = 0
    while rt.ledger.remaining() >= n_units:
        rt.ledger.start_episode()
        final_profile = _pe_evaluation_profile(rt, sampler, data_flat)
        obs = _query_top_fidelity(rt, final_profile)
        data_flat.append(rt.cset.profile_to_flat(final_profile))
        episodes.append(
            EpisodeLog(
                index=j,
                exploration=[],
                exploration_observations=[[] for _ in rt.players],
                stop_reason="evaluation_only",
                final_profile=final_profile,
                final_observations=obs,
                spend_units=rt.ledger.spent_episode_units,
                final_eps=rt.scorer.max_dissatisfaction(final_profile),
            )
        )
        j += 1
    return _finalize("pe", rt, episodes, seed, t0)


POLICIES: dict[str, Callable[..., RunResult]] = {
    "mf-ucb-pne": run_mf_ucb_pne,
    "ucb-pne": run_ucb_pne,
    "pe": run_pe,
}


def run_policy(
    policy: str,
    spec: GameSpec,
    oracle: UtilityOracle,
    scorer: TruthScorer,
    seed: int,
    config: PolicyConfig,
) -> RunResult:
    if policy not in POLICIES:
        raise KeyError(f"unknown policy {policy!r}; choose from {sorted(POLICIES)}")
    return POLICIES[policy](spec, oracle, scorer, seed, config)


def returned_solution(result: RunResult) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(last evaluated profile, best-visited profile by true dissatisfaction)."""
    if result.degenerate or not result.episodes:
        raise ValueError("run produced no evaluation step")
    last = result.episodes[-1].final_profile
    best_ep = min(result.episodes, key=lambda ep: (ep.final_eps, ep.index))
    return last, best_ep.final_profile
