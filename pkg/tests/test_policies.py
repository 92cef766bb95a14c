from __future__ import annotations

import numpy as np
import pytest

from mfpne.game import DissatisfactionTable, GameSpec
from mfpne.mogp import KernelParams
from mfpne.policies import (
    PolicyConfig,
    pne_sample_scores,
    returned_solution,
    run_mf_ucb_pne,
    run_pe,
    run_policy,
    run_ucb_pne,
)
from mfpne.testbeds import synthetic
from mfpne.testbeds.base import normalize_ladder
from mfpne.testbeds.synthetic import SyntheticGame, sample_prior_tables


def _small_instance(seed=0, budget=24.0, grid_points=12, m=2, eta=0.5):
    if m == 2:
        return synthetic.make_instance(seed=seed, budget=budget, eta=eta, grid_points=grid_points)
    grids = tuple(np.linspace(-1, 1, grid_points)[:, None] for _ in range(2))
    gen = KernelParams(h=0.89, zeta=(), rho=(), num_fidelities=1)
    tables = sample_prior_tables(gen, grids, seed)
    oracle = SyntheticGame(tables, 0.1)
    probe = GameSpec(
        action_grids=grids, num_fidelities=1, costs=(1.0,), sigma2=0.1,
        budget=budget, dissatisfaction_bound=1.0, rkhs_bound=2.0, delta=0.1, eta=eta,
    )
    table = DissatisfactionTable.from_oracle(oracle, probe)
    spec = GameSpec(
        action_grids=grids, num_fidelities=1, costs=(1.0,), sigma2=0.1,
        budget=budget, dissatisfaction_bound=max(1.05 * float(table.f.max()), 1e-6),
        rkhs_bound=2.0, delta=0.1, eta=eta,
    )

    class Bundle:
        pass

    b = Bundle()
    b.spec, b.oracle, b.scorer = spec, oracle, table
    b.policy_config = PolicyConfig(surrogate=gen)
    return b


class TestStructure:
    @pytest.mark.parametrize("policy", ["mf-ucb-pne", "ucb-pne", "pe"])
    def test_budget_and_fidelity_structure(self, policy):
        inst = _small_instance(seed=1, budget=20.0)
        res = run_policy(policy, inst.spec, inst.oracle, inst.scorer, 5, inst.policy_config)
        assert res.spend <= inst.spec.budget + 1e-12
        top = inst.spec.num_fidelities
        for ep in res.episodes:
            for d in ep.exploration:
                assert min(d.fidelities) < top
            assert ep.spend >= inst.spec.num_players  # evaluation always charged
        assert not res.degenerate

    def test_episode_spend_decomposition(self):
        inst = _small_instance(seed=2, budget=24.0)
        res = run_mf_ucb_pne(inst.spec, inst.oracle, inst.scorer, 3, inst.policy_config)
        n = inst.spec.num_players
        for ep in res.episodes:
            explo = sum(
                sum(inst.spec.costs[m - 1] for m in d.fidelities) for d in ep.exploration
            )
            assert ep.spend == pytest.approx(explo + n, abs=1e-9)

    def test_simple_regret_trace_monotone(self):
        inst = _small_instance(seed=3, budget=32.0)
        for policy in ("mf-ucb-pne", "ucb-pne", "pe"):
            res = run_policy(policy, inst.spec, inst.oracle, inst.scorer, 1, inst.policy_config)
            trace = res.simple_regret_trace
            assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))
            assert all(v >= 0 for v in trace)

    def test_regret_identity_with_reward_stream(self):
        # episode-sum regret equals (spend/N) * ideal - total reward
        inst = _small_instance(seed=4, budget=24.0)
        res = run_mf_ucb_pne(inst.spec, inst.oracle, inst.scorer, 2, inst.policy_config)
        c = inst.spec.dissatisfaction_bound
        ideal = 1.0 - inst.scorer.eps_star / c
        direct = (res.spend / inst.spec.num_players) * ideal - res.reward_total
        assert res.cum_regret == pytest.approx(direct, abs=1e-9)

    def test_seeded_repeatability(self):
        inst = _small_instance(seed=5, budget=24.0)
        for policy in ("mf-ucb-pne", "ucb-pne", "pe"):
            a = run_policy(policy, inst.spec, inst.oracle, inst.scorer, 9, inst.policy_config)
            b = run_policy(policy, inst.spec, inst.oracle, inst.scorer, 9, inst.policy_config)
            assert a.decision_trace() == b.decision_trace()
            assert a.to_dict()["episodes"] == b.to_dict()["episodes"]


class TestUcbPne:
    def test_iterate_count_budget_32(self):
        inst = _small_instance(seed=6, budget=32.0)
        res = run_ucb_pne(inst.spec, inst.oracle, inst.scorer, 0, inst.policy_config)
        assert len(res.episodes) == 16  # cost N=2 per iterate
        for ep in res.episodes:
            assert not ep.exploration

    def test_single_iterate_when_exactly_n_remains(self):
        inst = _small_instance(seed=7, budget=24.0)
        from mfpne.acquisition import COST_UNIT

        res = run_ucb_pne(
            inst.spec, inst.oracle, inst.scorer, 0, inst.policy_config,
            _initial_spent_units=int(24.0 * COST_UNIT) - 2 * COST_UNIT,
        )
        assert len(res.episodes) == 1

    def test_degenerate_when_budget_below_evaluation_cost(self):
        inst = _small_instance(seed=8, budget=24.0)
        from mfpne.acquisition import COST_UNIT

        res = run_ucb_pne(
            inst.spec, inst.oracle, inst.scorer, 0, inst.policy_config,
            _initial_spent_units=int(24.0 * COST_UNIT) - COST_UNIT,
        )
        assert res.degenerate and not res.episodes
        with pytest.raises(ValueError):
            returned_solution(res)


class TestDegenerateLadder:
    def test_single_fidelity_equals_ucb_trace(self):
        inst = _small_instance(seed=9, budget=20.0, m=1)
        for seed in range(3):
            a = run_mf_ucb_pne(inst.spec, inst.oracle, inst.scorer, seed, inst.policy_config)
            b = run_ucb_pne(inst.spec, inst.oracle, inst.scorer, seed, inst.policy_config)
            assert a.decision_trace() == b.decision_trace()


class TestPe:
    def test_scores_match_enumeration(self):
        rng = np.random.default_rng(0)
        draws = [rng.normal(size=(16, 3, 3)) for _ in range(2)]
        scores = pne_sample_scores(draws)
        for profile in np.ndindex(3, 3):
            count = 0
            for s in range(16):
                ok = True
                for n in range(2):
                    col = list(profile)
                    col[n] = slice(None)
                    if draws[n][(s,) + tuple(col)].max() > draws[n][(s,) + profile]:
                        ok = False
                if ok:
                    count += 1
            assert scores[profile] == pytest.approx(count / 16)

    def test_concentrated_posterior_selects_unique_pne(self):
        # draws concentrated on a game with a unique equilibrium: the vote
        # converges to that profile as the sample count grows
        rng = np.random.default_rng(1)
        truth = [rng.normal(size=(4, 4)) for _ in range(2)]
        # force a strict dominant-strategy equilibrium at (1, 2)
        truth[0][1, :] = truth[0].max() + 1.0
        truth[1][:, 2] = truth[1].max() + 1.0
        for count, spread in ((8, 1e-3), (64, 1e-3), (512, 1e-3)):
            draws = [
                t[None, :, :] + spread * rng.normal(size=(count, 4, 4)) for t in truth
            ]
            scores = pne_sample_scores(draws)
            assert np.unravel_index(int(np.argmax(scores)), (4, 4)) == (1, 2)
        assert scores[1, 2] == 1.0

    def test_symmetric_posterior_splits_selection(self):
        draws = [np.zeros((8, 2, 2)), np.zeros((8, 2, 2))]
        scores = pne_sample_scores(draws)
        # all-equal draws: every profile is an equilibrium in every draw
        assert np.all(scores == 1.0)


class TestReturnedSolution:
    def test_single_episode(self):
        inst = _small_instance(seed=11, budget=24.0)
        from mfpne.acquisition import COST_UNIT

        res = run_ucb_pne(
            inst.spec, inst.oracle, inst.scorer, 0, inst.policy_config,
            _initial_spent_units=int(24.0 * COST_UNIT) - 2 * COST_UNIT,
        )
        last, best = returned_solution(res)
        assert last == best == res.episodes[0].final_profile

    def test_best_profile_attains_minimum_logged_eps(self):
        inst = _small_instance(seed=12, budget=32.0)
        res = run_ucb_pne(inst.spec, inst.oracle, inst.scorer, 4, inst.policy_config)
        _, best = returned_solution(res)
        min_eps = min(ep.final_eps for ep in res.episodes)
        assert inst.scorer.max_dissatisfaction(best) == pytest.approx(min_eps)


class TestExplorationGeometry:
    def test_exploration_spread_exceeds_evaluation_spread(self):
        # median over seeds of mean pairwise distance: exploration steps roam,
        # evaluation steps cluster near the equilibrium region
        def dispersion(coord_list):
            if len(coord_list) < 2:
                return 0.0
            pts = np.asarray(coord_list)
            d = pts[:, None, :] - pts[None, :, :]
            return float(np.sqrt((d * d).sum(axis=2)).mean())

        ratios = []
        for seed in range(20):
            inst = synthetic.make_instance(seed=seed, budget=32.0, grid_points=128)
            res = run_mf_ucb_pne(inst.spec, inst.oracle, inst.scorer, seed, inst.policy_config)
            explo = [
                inst.spec.profile_coords(d.profile)
                for ep in res.episodes
                for d in ep.exploration
            ]
            evals = [inst.spec.profile_coords(ep.final_profile) for ep in res.episodes]
            if len(explo) >= 2 and len(evals) >= 2:
                ratios.append(dispersion(explo) - dispersion(evals))
        assert len(ratios) >= 10
        assert np.median(ratios) > 0
