"""Exploration phase: information-per-cost selection, budget ledger, stop rules.

Budget arithmetic runs in integer micro-units (1 normalized cost unit = 10^6
micro-units) so the hard budget invariants hold exactly; every fidelity ladder
used by the testbeds quantizes exactly at this resolution.

The per-step decision maximizes the summed per-player information of a single
query divided by its total cost, over candidate profiles x fidelity vectors,
subject to leaving enough budget for one full-fidelity evaluation. Small
fidelity lattices are enumerated exactly; large ones use a per-profile
Dinkelbach fixpoint on the ratio objective plus a greedy downgrade repair when
the cost cap binds (approximate only in that rare regime).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

from .candidates import CandidatePosterior, CandidateSet
from .game import GameSpec, UtilityOracle
from .mogp import (
    MogpModel,
    ObservationRecord,
    append_observation,
    kernel_matrix,
    mutual_information_sequence,
)

__all__ = [
    "COST_UNIT",
    "StopReason",
    "BudgetLedger",
    "DecisionPair",
    "ExplorationOutcome",
    "PlayerState",
    "SequenceInformationTracker",
    "select_decision",
    "select_exploration_pair",
    "check_stop_insufficient",
    "check_stop_fidelity_fraction",
    "check_stop_mi_ratio",
    "run_exploration_phase",
]

COST_UNIT = 10**6
EXACT_LATTICE_LIMIT = 256


class StopReason(str, Enum):
    INSUFFICIENT_BUDGET = "insufficient_budget"
    FIDELITY_FRACTION = "fidelity_fraction"
    MI_RATIO = "mi_ratio"


def cost_units(spec: GameSpec) -> np.ndarray:
    units = np.rint(np.asarray(spec.costs) * COST_UNIT).astype(np.int64)
    if np.max(np.abs(units / COST_UNIT - np.asarray(spec.costs))) > 1e-9:
        raise ValueError("costs do not quantize at micro-unit resolution")
    return units


@dataclass
class BudgetLedger:
    """Exact spend accounting across a run and within the current episode.

    All fields are integer micro-units. remaining() is the run-level budget
    left; remaining_in_episode() reproduces the within-episode remainder
    (episode-start snapshot minus the episode's exploration spend).
    """

    budget_units: int
    spent_total_units: int = 0
    episode_start_units: int = field(default=-1)
    spent_episode_units: int = 0

    def __post_init__(self):
        if self.episode_start_units < 0:
            self.episode_start_units = self.budget_units - self.spent_total_units

    @classmethod
    def for_spec(cls, spec: GameSpec) -> "BudgetLedger":
        return cls(budget_units=int(round(spec.budget * COST_UNIT)))

    def start_episode(self) -> None:
        self.episode_start_units = self.budget_units - self.spent_total_units
        self.spent_episode_units = 0

    def remaining(self) -> int:
        return self.budget_units - self.spent_total_units

    def remaining_in_episode(self) -> int:
        return self.episode_start_units - self.spent_episode_units

    def charge(self, units: int) -> None:
        if units < 0:
            raise ValueError("negative charge")
        if self.spent_total_units + units > self.budget_units:
            raise AssertionError(
                f"budget violation: {self.spent_total_units + units} > {self.budget_units}"
            )
        self.spent_total_units += units
        self.spent_episode_units += units

    @property
    def spent_total(self) -> float:
        return self.spent_total_units / COST_UNIT

    @property
    def spent_episode(self) -> float:
        return self.spent_episode_units / COST_UNIT


@dataclass(frozen=True)
class DecisionPair:
    """One query: joint action profile plus per-player fidelity levels."""

    profile: tuple[int, ...]
    fidelities: tuple[int, ...]


@dataclass
class ExplorationOutcome:
    sequence: list[DecisionPair]
    observations: list[list[float]]  # per player, per retained step
    stop_reason: StopReason
    episode_mi_per_player: np.ndarray
    spend_units: int


@dataclass
class PlayerState:
    """One player's surrogate plus its candidate-set view; mutated in place."""

    model: MogpModel
    cache: CandidatePosterior

    def absorb(self, rec: ObservationRecord) -> None:
        self.model = append_observation(self.model, rec)
        self.cache.sync(self.model)


def _enumerate_lattice(num_players: int, num_fidelities: int) -> np.ndarray:
    """All fidelity vectors in lexicographic order, 1-based, (M^N, N)."""
    grids = np.indices((num_fidelities,) * num_players)
    return grids.reshape(num_players, -1).T + 1


def select_decision(
    mi_tables: np.ndarray,
    units: np.ndarray,
    cap_units: int,
) -> tuple[int, tuple[int, ...]] | None:
    """Maximize summed information per unit cost under the cost cap.

    mi_tables: (N, Q, M) one-step information of querying candidate q at
    fidelity m for player n. Returns (flat candidate index, 1-based fidelity
    vector), ties resolved to the lowest (candidate, fidelity-vector) pair in
    lexicographic order; None when no fidelity vector fits the cap.
    """
    n, q, m = mi_tables.shape
    if n * np.min(units) > cap_units:
        return None
    if m**n <= EXACT_LATTICE_LIMIT:
        lattice = _enumerate_lattice(n, m)
        combo_units = units[lattice - 1].sum(axis=1)
        feasible = combo_units <= cap_units
        total = np.zeros((q, lattice.shape[0]))
        for player in range(n):
            total += mi_tables[player][:, lattice[:, player] - 1]
        ratio = total / (combo_units / COST_UNIT)[None, :]
        ratio[:, ~feasible] = -np.inf
        flat = int(np.argmax(ratio))
        qi, ci = np.unravel_index(flat, ratio.shape)
        return int(qi), tuple(int(v) for v in lattice[ci])
    return _select_decision_dinkelbach(mi_tables, units, cap_units)


def _select_decision_dinkelbach(
    mi_tables: np.ndarray, units: np.ndarray, cap_units: int
) -> tuple[int, tuple[int, ...]]:
    n, q, m = mi_tables.shape
    lam = units / COST_UNIT
    # start from each player's own best information-per-cost fidelity
    choice = np.argmax(mi_tables / lam[None, None, :], axis=2)  # (N, Q)
    for _ in range(32):
        tot_mi = np.take_along_axis(mi_tables, choice[:, :, None], axis=2)[:, :, 0].sum(axis=0)
        tot_cost = lam[choice].sum(axis=0)
        r = tot_mi / tot_cost
        new_choice = np.argmax(mi_tables - r[None, :, None] * lam[None, None, :], axis=2)
        if np.array_equal(new_choice, choice):
            break
        choice = new_choice
    cost_u = units[choice].sum(axis=0)
    over = np.flatnonzero(cost_u > cap_units)
    for qi in over:
        fids = choice[:, qi].copy()
        while units[fids].sum() > cap_units:
            best_player, best_score = -1, np.inf
            for player in range(n):
                if fids[player] == 0:
                    continue
                loss = mi_tables[player, qi, fids[player]] - mi_tables[player, qi, fids[player] - 1]
                saved = units[fids[player]] - units[fids[player] - 1]
                score = loss / max(saved, 1)
                if score < best_score:
                    best_player, best_score = player, score
            fids[best_player] -= 1
        choice[:, qi] = fids
    tot_mi = np.take_along_axis(mi_tables, choice[:, :, None], axis=2)[:, :, 0].sum(axis=0)
    tot_cost = units[choice].sum(axis=0) / COST_UNIT
    ratio = tot_mi / tot_cost
    qi = int(np.argmax(ratio))
    return qi, tuple(int(v) + 1 for v in choice[:, qi])


def mi_tables_from_caches(players: list[PlayerState], num_fidelities: int) -> np.ndarray:
    """Per-player one-step information at every (candidate, fidelity)."""
    out = []
    for p in players:
        sigma2 = p.model.sigma2
        cols = [0.5 * np.log1p(p.cache.variances(m) / sigma2) for m in range(1, num_fidelities + 1)]
        out.append(np.column_stack(cols))
    return np.asarray(out)


def select_exploration_pair(
    players: list[PlayerState],
    spec: GameSpec,
    cset: CandidateSet,
    ledger: BudgetLedger,
) -> DecisionPair | None:
    """Spec-level wrapper: next candidate decision, or None when infeasible."""
    units = cost_units(spec)
    cap = ledger.remaining_in_episode() - spec.num_players * COST_UNIT
    picked = select_decision(mi_tables_from_caches(players, spec.num_fidelities), units, cap)
    if picked is None:
        return None
    flat, fids = picked
    return DecisionPair(profile=cset.flat_to_profile(flat), fidelities=fids)


def check_stop_insufficient(ledger: BudgetLedger, spec: GameSpec) -> bool:
    """Remaining budget cannot fund one cheapest exploration plus evaluation."""
    units = cost_units(spec)
    need = spec.num_players * (int(units[0]) + COST_UNIT)
    return ledger.remaining_in_episode() < need


def check_stop_fidelity_fraction(candidate: DecisionPair, eta: float, num_fidelities: int) -> bool:
    """Candidate already queries a large enough share of players at the top."""
    n = len(candidate.fidelities)
    frac = sum(1 for m in candidate.fidelities if m == num_fidelities) / n
    return frac >= eta - 1e-12


class _GrowingCholesky:
    """Lower-triangular factor of a growing SPD matrix, one appended row at a
    time, with a running log-determinant. Rows live in a preallocated buffer so
    a previewed row becomes committed by bumping the count."""

    def __init__(self, capacity: int = 64):
        self._l = np.zeros((capacity, capacity))
        self.count = 0
        self.logdet = 0.0

    def _grow(self, need: int) -> None:
        cap = self._l.shape[0]
        while cap < need:
            cap *= 2
        fresh = np.zeros((cap, cap))
        fresh[: self.count, : self.count] = self._l[: self.count, : self.count]
        self._l = fresh

    def place_row(self, at: int, cross: np.ndarray, diag: float) -> float | None:
        """Write row `at` (>= count allowed for previews) given covariances to
        the first `at` rows; returns the row's log-determinant contribution or
        None when the pivot is numerically lost."""
        if at + 1 > self._l.shape[0]:
            self._grow(at + 1)
        if at:
            w = scipy.linalg.solve_triangular(
                self._l[:at, :at], cross, lower=True, check_finite=False
            )
        else:
            w = np.zeros(0)
        s2 = diag - float(w @ w)
        if s2 <= 1e-14:
            return None
        self._l[at, :at] = w
        self._l[at, at] = np.sqrt(s2)
        return float(np.log(s2))

    def commit_rows(self, count: int, logdet_delta: float) -> None:
        self.count += count
        self.logdet += logdet_delta


class SequenceInformationTracker:
    """Joint information of one player's episode query sequence, incrementally.

    Tracks I(observations; top-fidelity utilities at the queried profiles)
    conditioned on the episode-start dataset, via three growing factors:
    the observation block (plus noise), the jittered latent block, and the
    interleaved joint matrix; the information is half of
    (logdet_obs + logdet_latent - logdet_joint) by the Schur identity, which
    matches the from-scratch computation at the same jitter exactly.

    preview(x, m) returns the information with the candidate included; commit()
    absorbs the last previewed candidate. Falls back to the dense computation
    if a pivot degenerates (repeated profiles exhausting the base jitter).
    """

    def __init__(self, model0: MogpModel, jitter: float = 1e-10):
        self.model0 = model0
        self.params = model0.params
        self.sigma2 = model0.sigma2
        self.jitter = jitter
        self.top = self.params.num_fidelities
        self._coords: list[np.ndarray] = []  # per step, the queried profile
        self._fids: list[int] = []
        # interleaved points: (x, top), (x, m) per step
        self._pts_x: list[np.ndarray] = []
        self._pts_m: list[int] = []
        self._v0 = np.zeros((model0.num_observations, 0))
        self._f_obs = _GrowingCholesky()
        self._f_lat = _GrowingCholesky()
        self._f_joint = _GrowingCholesky()
        self._mi = 0.0
        self._pending: dict | None = None
        self._degraded = False

    @property
    def mi(self) -> float:
        return self._mi

    def _dense_mi(self, extra: tuple[np.ndarray, int] | None) -> float:
        seq = list(zip(self._coords, self._fids))
        if extra is not None:
            seq = seq + [extra]
        if not seq:
            return 0.0
        return mutual_information_sequence(self.model0, seq)

    def preview(self, x: np.ndarray, m: int) -> float:
        """Information of the committed sequence extended by one (x, m) query."""
        if self._degraded:
            self._pending = {"dense": (np.asarray(x, float), int(m))}
            return self._dense_mi((np.asarray(x, float), int(m)))
        x = np.asarray(x, dtype=float)
        new_x = np.vstack([x, x])
        new_m = np.array([self.top, int(m)])
        t0 = self.model0.num_observations
        s2 = len(self._pts_m)  # interleaved count = 2 * steps
        if t0:
            kt = kernel_matrix(
                self.params, self.model0.train_x, self.model0.train_m, new_x, new_m
            )
            v_ab = scipy.linalg.solve_triangular(
                self.model0.chol, kt, lower=True, check_finite=False
            )
        else:
            v_ab = np.zeros((0, 2))
        if s2:
            prev_x = np.vstack(self._pts_x)
            prev_m = np.asarray(self._pts_m, dtype=int)
            cov_prev = kernel_matrix(self.params, prev_x, prev_m, new_x, new_m)
            if t0:
                cov_prev -= self._v0[:, :s2].T @ v_ab
        else:
            cov_prev = np.zeros((0, 2))
        cov_aa = 1.0 - float(v_ab[:, 0] @ v_ab[:, 0])
        cov_bb = 1.0 - float(v_ab[:, 1] @ v_ab[:, 1])
        prior_ab = kernel_matrix(self.params, x[None, :], [self.top], x[None, :], [int(m)])[0, 0]
        cov_ab = prior_ab - float(v_ab[:, 0] @ v_ab[:, 1])

        lat_rows = self._f_lat.count
        obs_rows = self._f_obs.count
        ld_lat = self._f_lat.place_row(lat_rows, cov_prev[0::2, 0], cov_aa + self.jitter)
        ld_obs = self._f_obs.place_row(obs_rows, cov_prev[1::2, 1], cov_bb + self.sigma2)
        ld_j1 = self._f_joint.place_row(s2, cov_prev[:, 0], cov_aa + self.jitter)
        ld_j2 = (
            self._f_joint.place_row(
                s2 + 1, np.append(cov_prev[:, 1], cov_ab), cov_bb + self.sigma2
            )
            if ld_j1 is not None
            else None
        )
        if None in (ld_lat, ld_obs, ld_j1, ld_j2):
            self._degraded = True
            self._pending = {"dense": (x, int(m))}
            return self._dense_mi((x, int(m)))
        self._pending = {
            "x": x,
            "m": int(m),
            "v_ab": v_ab,
            "ld_lat": ld_lat,
            "ld_obs": ld_obs,
            "ld_joint": ld_j1 + ld_j2,
        }
        total = (
            (self._f_obs.logdet + ld_obs)
            + (self._f_lat.logdet + ld_lat)
            - (self._f_joint.logdet + ld_j1 + ld_j2)
        )
        return max(0.5 * total, 0.0)

    def commit(self) -> None:
        if self._pending is None:
            raise RuntimeError("nothing previewed")
        pend = self._pending
        self._pending = None
        if "dense" in pend:
            x, m = pend["dense"]
            self._coords.append(x)
            self._fids.append(m)
            self._pts_x.extend([x, x])
            self._pts_m.extend([self.top, m])
            self._mi = self._dense_mi(None)
            return
        x, m = pend["x"], pend["m"]
        self._coords.append(x)
        self._fids.append(m)
        self._pts_x.extend([x, x])
        self._pts_m.extend([self.top, m])
        if self.model0.num_observations:
            self._v0 = np.hstack([self._v0, pend["v_ab"]])
        self._f_lat.commit_rows(1, pend["ld_lat"])
        self._f_obs.commit_rows(1, pend["ld_obs"])
        self._f_joint.commit_rows(2, pend["ld_joint"])
        self._mi = max(
            0.5 * (self._f_obs.logdet + self._f_lat.logdet - self._f_joint.logdet), 0.0
        )


def check_stop_mi_ratio(
    episode_start_models: list[MogpModel],
    sequence: list[DecisionPair],
    spec: GameSpec,
    cset: CandidateSet,
    ledger: BudgetLedger,
) -> bool:
    """Accumulated joint information per unit cost fell below the episode bar.

    Evaluated on the sequence including the candidate under consideration,
    conditioned on the episode-start datasets; the bar is 1/sqrt of the
    episode-start remaining budget.
    """
    if not sequence:
        raise ValueError("sequence must include at least the candidate")
    units = cost_units(spec)
    total_mi = 0.0
    total_units = 0
    for n, model0 in enumerate(episode_start_models):
        seq_n = [
            (cset.coords[cset.profile_to_flat(d.profile)], d.fidelities[n])
            for d in sequence
        ]
        total_mi += mutual_information_sequence(model0, seq_n)
        total_units += int(sum(units[d.fidelities[n] - 1] for d in sequence))
    lam_total_j = ledger.episode_start_units / COST_UNIT
    ratio = total_mi / (total_units / COST_UNIT)
    return ratio < 1.0 / np.sqrt(lam_total_j)


def run_exploration_phase(
    players: list[PlayerState],
    spec: GameSpec,
    cset: CandidateSet,
    ledger: BudgetLedger,
    oracle: UtilityOracle,
    noise_rngs: list[np.random.Generator],
) -> ExplorationOutcome:
    """One episode's exploration loop.

    Repeatedly selects the information-per-cost candidate; breaks (discarding
    the candidate) on the fidelity-fraction or information-ratio rules, or
    ends when the remaining budget cannot fund exploration plus evaluation.
    Committed queries update every player's dataset and the ledger.
    """
    units = cost_units(spec)
    trackers = [SequenceInformationTracker(p.model) for p in players]
    sequence: list[DecisionPair] = []
    observations: list[list[float]] = [[] for _ in players]
    spend_before = ledger.spent_episode_units
    seq_units = 0
    lam_total_j = ledger.episode_start_units / COST_UNIT
    bar = 1.0 / np.sqrt(lam_total_j)
    while True:
        if check_stop_insufficient(ledger, spec):
            reason = StopReason.INSUFFICIENT_BUDGET
            break
        candidate = select_exploration_pair(players, spec, cset, ledger)
        if candidate is None:
            reason = StopReason.INSUFFICIENT_BUDGET
            break
        if check_stop_fidelity_fraction(candidate, spec.eta, spec.num_fidelities):
            reason = StopReason.FIDELITY_FRACTION
            break
        coords = cset.coords[cset.profile_to_flat(candidate.profile)]
        cand_units = int(sum(units[f - 1] for f in candidate.fidelities))
        with_candidate_mi = sum(
            trackers[n].preview(coords, candidate.fidelities[n])
            for n in range(len(players))
        )
        ratio = with_candidate_mi / ((seq_units + cand_units) / COST_UNIT)
        if ratio < bar:
            reason = StopReason.MI_RATIO
            break
        step_units = 0
        for n, player in enumerate(players):
            fid = candidate.fidelities[n]
            y = oracle.evaluate(n, candidate.profile, fid, noise_rngs[n])
            player.absorb(ObservationRecord(tuple(coords), fid, float(y)))
            observations[n].append(float(y))
            trackers[n].commit()
            step_units += int(units[fid - 1])
        ledger.charge(step_units)
        seq_units += step_units
        sequence.append(candidate)

    mi_per_player = np.array([t.mi for t in trackers])
    if sequence:
        spent = (ledger.spent_episode_units - spend_before) / COST_UNIT
        retained_ratio = float(mi_per_player.sum()) / spent
        if retained_ratio < bar - 1e-9:
            raise AssertionError(
                "retained exploration sequence violates the information-ratio bound"
            )
        top = spec.num_fidelities
        for d in sequence:
            if min(d.fidelities) >= top:
                raise AssertionError("retained exploration step queried all players at top fidelity")
    return ExplorationOutcome(
        sequence=sequence,
        observations=observations,
        stop_reason=reason,
        episode_mi_per_player=mi_per_player,
        spend_units=ledger.spent_episode_units - spend_before,
    )
