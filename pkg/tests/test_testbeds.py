from __future__ import annotations

import numpy as np
import pytest
import scipy.special

from mfpne import game
from mfpne.game import GameSpec
from mfpne.mogp import KernelParams
from mfpne.testbeds import aloha, power, synthetic
from mfpne.testbeds.aloha import (
    AlohaGame,
    AlohaParams,
    AlohaScorer,
    aloha_fixed_point_equilibrium,
    exact_eps_star,
    fixed_point_profile,
    terminal_actions,
)
from mfpne.testbeds.power import PowerGame, PowerParams
from mfpne.testbeds.synthetic import sample_prior_tables

import oracles


class TestSyntheticSampling:
    def test_same_seed_identical_tables(self):
        grids = tuple(np.linspace(-1, 1, 9)[:, None] for _ in range(2))
        a = sample_prior_tables(synthetic.GEN_PARAMS_N2, grids, 123)
        b = sample_prior_tables(synthetic.GEN_PARAMS_N2, grids, 123)
        for ta, tb in zip(a, b):
            for m in ta:
                np.testing.assert_array_equal(ta[m], tb[m])

    def test_marginal_variance_is_unit(self):
        grids = tuple(np.linspace(-1, 1, 5)[:, None] for _ in range(2))
        draws = {1: [], 2: []}
        for seed in range(500):
            tables = sample_prior_tables(synthetic.GEN_PARAMS_N2, grids, seed)
            for m in (1, 2):
                draws[m].append(tables[0][m][2, 3])
        for m in (1, 2):
            v = np.var(draws[m], ddof=1)
            se = np.sqrt(2.0 / 499)  # var of sample variance of unit gaussian
            assert abs(v - 1.0) < 3 * se

    def test_cross_fidelity_correlation_matches_cascade(self):
        grids = tuple(np.linspace(-1, 1, 5)[:, None] for _ in range(2))
        lo, hi = [], []
        for seed in range(500):
            tables = sample_prior_tables(synthetic.GEN_PARAMS_N2, grids, seed + 10_000)
            lo.append(tables[1][1][1, 1])
            hi.append(tables[1][2][1, 1])
        corr = np.corrcoef(lo, hi)[0, 1]
        se = (1 - 0.768**2) / np.sqrt(499)
        assert abs(corr - 0.768) < 3 * se

    def test_joint_draw_covariance_against_kernel(self):
        # covariance across two grid points and both fidelities matches the
        # cascade kernel (Monte Carlo over instances)
        grids = tuple(np.linspace(-1, 1, 4)[:, None] for _ in range(2))
        p = synthetic.GEN_PARAMS_N2
        samples = []
        for seed in range(800):
            t = sample_prior_tables(p, grids, seed + 50_000)[0]
            samples.append([t[1][0, 0], t[2][3, 2]])
        samples = np.asarray(samples)
        cov = np.cov(samples.T)[0, 1]
        from mfpne.mogp import kernel_eval

        x1 = np.array([grids[0][0, 0], grids[1][0, 0]])
        x2 = np.array([grids[0][3, 0], grids[1][2, 0]])
        want = kernel_eval(p, x1, 1, x2, 2)
        prod_sd = 1.0  # unit marginals
        assert abs(cov - want) < 3 * prod_sd * 1.2 / np.sqrt(799)

    def test_instance_eps_star_matches_oracle(self):
        inst = synthetic.make_instance(seed=3, budget=8.0, grid_points=6)
        tables = [inst.oracle.true_utility_table(n) for n in range(2)]
        eps, profile = oracles.enumerate_eps_star(tables)
        assert inst.scorer.eps_star == pytest.approx(eps, abs=1e-12)
        assert inst.scorer.argmin_profile == profile

    def test_misspecified_surrogate_differs(self):
        a = synthetic.make_instance(seed=0, budget=8.0, grid_points=6, well_specified=True)
        b = synthetic.make_instance(seed=0, budget=8.0, grid_points=6, well_specified=False)
        assert a.policy_config.surrogate != b.policy_config.surrogate
        assert b.policy_config.surrogate.h == 0.62

    def test_functional_instance_runs(self):
        inst = synthetic.make_instance_n10(
            seed=0, budget=30.0, grid_points=4, reference_samples=64
        )
        assert inst.spec.num_players == 10
        assert inst.scorer.eps_star >= 0
        val = inst.scorer.max_dissatisfaction((0,) * 10)
        assert val >= 0


class TestPowerGame:
    def test_single_link_closed_form(self):
        params = PowerParams(
            num_links=1,
            grid_points=1,
            power_db_min=0.0,
            power_db_max=0.0,
            noise_power_db=0.0,
            penalty=0.1,
            truth_samples=200_000,
        )
        g = PowerGame(params, seed=0)
        got, stderr = g.true_utility_with_stderr(0, (0,))
        want = float(np.e * scipy.special.exp1(1.0)) - 0.1
        assert abs(got - want) < 3 * stderr

    def test_truth_matches_quadrature_oracle_with_interference(self):
        params = PowerParams(
            num_links=3, grid_points=4, truth_samples=400_000
        )
        g = PowerGame(params, seed=1)
        profile = (1, 3, 2)
        got, stderr = g.true_utility_with_stderr(0, profile)
        p = g.powers_lin[list(profile)]
        want = oracles.expected_log1p_sinr(
            p[0], p[1:], g.noise_lin, g.psi_lin
        ) - params.penalty * p[0]
        assert abs(got - want) < 3 * stderr + 1e-6

    def test_fidelity_variance_scaling(self):
        params = PowerParams(num_links=2, grid_points=4)
        g = PowerGame(params, seed=2)
        rng = np.random.default_rng(0)
        lo = [g.evaluate(0, (2, 2), 1, rng) for _ in range(3000)]
        hi = [g.evaluate(0, (2, 2), 5, rng) for _ in range(3000)]
        ratio = np.var(hi, ddof=1) / np.var(lo, ddof=1)
        assert ratio == pytest.approx(1.0 / 100.0, rel=0.25)

    def test_truth_cache_deterministic(self):
        params = PowerParams(num_links=2, grid_points=4, truth_samples=10_000)
        a = PowerGame(params, seed=3).true_utility(1, (0, 3))
        b = PowerGame(params, seed=3).true_utility(1, (0, 3))
        assert a == b

    def test_instance_sigma2_calibration(self):
        inst = power.make_instance(
            seed=0,
            budget=40.0,
            params=PowerParams(num_links=3, grid_points=4, truth_samples=5_000),
            reference_samples=8,
        )
        geo = float(np.exp(np.mean(np.log([1, 10, 20, 50, 100]))))
        assert inst.spec.sigma2 > 0
        assert inst.metadata["sigma2_calibrated"] == inst.spec.sigma2
        # single-draw variance implied by the calibration is sigma2 * geomean
        assert inst.spec.sigma2 * geo < 10.0


class TestAlohaGame:
    def test_grid_respects_caps_and_load_bound(self):
        params = AlohaParams()
        for n in range(params.num_terminals):
            acts = terminal_actions(params, n)
            energy = acts[:, 0] * (50.0 + 70.0 * acts[:, 1])
            assert np.all(energy <= params.energy_caps[n] + 1e-9)
            assert np.all(acts[:, 0] * acts[:, 1] < 1.0)

    def test_idle_terminal_utility(self):
        params = AlohaParams(num_terminals=2, energy_caps=(60.0, 55.0))
        g = AlohaGame(params)
        # find an action with x2 == 0 and x1 > 0 for terminal 0
        idx = next(
            i for i, (x1, x2) in enumerate(g.actions[0]) if x2 == 0.0 and x1 > 0
        )
        profile = (idx, 0)
        assert g.throughput(0, profile) == 0.0
        x1 = g.actions[0][idx, 0]
        assert g.true_utility(0, profile) == pytest.approx(-params.xi * 50.0 * x1)

    def test_single_terminal_collapse(self):
        params = AlohaParams(num_terminals=1, energy_caps=(121.0,))
        g = AlohaGame(params)
        for i, (x1, x2) in enumerate(g.actions[0]):
            if x1 == 1.0 and x2 < 1.0:
                assert g.throughput(0, (i,)) == pytest.approx(x2)
                want = x2 - params.xi * (50.0 + 70.0 * x2)
                assert g.true_utility(0, (i,)) == pytest.approx(want)

    def test_low_fidelity_swaps_tradeoff_only(self):
        params = AlohaParams()
        g = AlohaGame(params)
        profile = tuple(3 for _ in range(5))
        rng_a = np.random.default_rng(0)
        rng_b = np.random.default_rng(0)
        lo = g.evaluate(0, profile, 1, rng_a)
        hi = g.evaluate(0, profile, 4, rng_b)
        e0 = g.energy[0][3]
        assert lo - hi == pytest.approx((params.xi - params.omega[0]) * e0)

    def test_throughput_slack_inequality(self):
        params = AlohaParams()
        g = AlohaGame(params)
        rng = np.random.default_rng(1)
        for _ in range(50):
            profile = tuple(int(rng.integers(0, len(g.actions[n]))) for n in range(5))
            total = sum(g.throughput(n, profile) for n in range(5))
            loads = np.array([g.load[n][profile[n]] for n in range(5)])
            assert total <= 1.0 - np.prod(1.0 - loads) + 1e-12


class TestAlohaEpsStar:
    def _coarse_params(self):
        return AlohaParams(
            num_terminals=2,
            grid_points_per_axis=4,
            energy_caps=(120.0, 120.0),
        )

    def test_reduction_matches_generic_sweep(self):
        params = self._coarse_params()
        g = AlohaGame(params)
        eps, profile = exact_eps_star(g)
        grids = tuple(g.actions[n] for n in range(2))
        spec = GameSpec(
            action_grids=grids,
            num_fidelities=4,
            costs=(0.05, 0.25, 0.5, 1.0),
            sigma2=1e-4,
            budget=50.0,
            dissatisfaction_bound=1.0,
            rkhs_bound=1.0,
            delta=0.3,
            eta=0.5,
        )
        want_eps, _ = game.epsilon_star(g, spec)
        assert eps == pytest.approx(want_eps, abs=1e-12)
        # returned profile attains the value
        scorer = AlohaScorer(g)
        assert scorer.max_dissatisfaction(profile) == pytest.approx(eps, abs=1e-12)

    def test_scorer_pointwise_matches_generic(self):
        params = self._coarse_params()
        g = AlohaGame(params)
        scorer = AlohaScorer(g)
        grids = tuple(g.actions[n] for n in range(2))
        spec = GameSpec(
            action_grids=grids,
            num_fidelities=4,
            costs=(0.05, 0.25, 0.5, 1.0),
            sigma2=1e-4,
            budget=50.0,
            dissatisfaction_bound=1.0,
            rkhs_bound=1.0,
            delta=0.3,
            eta=0.5,
        )
        rng = np.random.default_rng(2)
        for _ in range(20):
            profile = tuple(int(rng.integers(0, len(g.actions[n]))) for n in range(2))
            want = game.max_dissatisfaction(g, spec, profile)
            assert scorer.max_dissatisfaction(profile) == pytest.approx(want, abs=1e-12)

    def test_full_scale_eps_star_finite_and_capped_instance(self):
        inst = aloha.make_instance(seed=0, budget=1000.0)
        assert inst.scorer.eps_star >= 0
        # energy caps respected across every grid action of every terminal
        params = AlohaParams()
        for n, grid in enumerate(inst.spec.action_grids):
            energy = grid[:, 0] * (50.0 + 70.0 * grid[:, 1])
            assert np.all(energy <= params.energy_caps[n] + 1e-9)


class TestFixedPoint:
    def test_dominant_strategy_converges_fast(self):
        params = AlohaParams(
            num_terminals=3,
            energy_caps=(60.0, 55.0, 50.0),
            xi=1.0,  # energy dominates: idling is dominant
        )
        g = AlohaGame(params)
        profile = aloha_fixed_point_equilibrium(g)
        scorer = AlohaScorer(g)
        assert scorer.max_dissatisfaction(profile) == pytest.approx(0.0, abs=1e-12)

    def test_matching_pennies_cycles(self):
        a = np.array([[1.0, -1.0], [-1.0, 1.0]])
        tables = [a, -a]

        def br(profile, n):
            col = list(profile)
            col[n] = slice(None)
            return int(np.argmax(tables[n][tuple(col)]))

        _, converged = fixed_point_profile(br, 2, (0, 0))
        assert not converged

    def test_fixed_point_matches_eps_star_when_zero(self):
        params = AlohaParams(
            num_terminals=2,
            grid_points_per_axis=4,
            energy_caps=(120.0, 120.0),
        )
        g = AlohaGame(params)
        eps, _ = exact_eps_star(g)
        profile = aloha_fixed_point_equilibrium(g)
        scorer = AlohaScorer(g)
        if eps == pytest.approx(0.0, abs=1e-12):
            assert scorer.max_dissatisfaction(profile) == pytest.approx(eps, abs=1e-9)
