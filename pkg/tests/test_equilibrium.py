from __future__ import annotations

import math

import numpy as np
import pytest

from mfpne import equilibrium, mogp
from mfpne.equilibrium import (
    build_confidence_state,
    confidence_scale,
    estimate_gamma,
    exploring_profile,
    final_evaluation_profile,
    reported_profile,
)
from mfpne.mogp import KernelParams

import oracles


class TestBeta:
    def test_noise_free_degenerate(self):
        assert confidence_scale(2.0, 0.0, math.exp(-1.0), 0.0) == pytest.approx(2.0)

    def test_direct_arithmetic(self):
        got = confidence_scale(1.0, 0.1, 0.1, 0.0)
        want = 1.0 + 4.0 * math.sqrt(0.1) * math.sqrt(1.0 + math.log(10.0))
        assert got == pytest.approx(want, abs=1e-12)

    def test_strictly_increasing_in_gamma(self):
        vals = [confidence_scale(1.0, 0.1, 0.1, g) for g in (0.0, 0.5, 2.0, 10.0)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_negative_gamma_rejected(self):
        with pytest.raises(ValueError):
            confidence_scale(1.0, 0.1, 0.1, -0.5)


class TestGamma:
    def _model(self, sigma2=0.1, m=2):
        params = KernelParams(
            h=1.0, zeta=(1.0,) * (m - 1), rho=(0.7,) * (m - 1), num_fidelities=m
        )
        return mogp.empty_model(params, sigma2, 1)

    def test_horizon_one_empty_data(self):
        model = self._model(sigma2=0.1)
        coords = np.linspace(-1, 1, 8)[:, None]
        got = estimate_gamma(model, coords, 1)
        assert got == pytest.approx(0.5 * math.log(1 + 1 / 0.1))

    def test_single_point_grid_matches_determinant_form(self):
        sigma2 = 0.3
        model = self._model(sigma2=sigma2)
        coords = np.array([[0.2]])
        for horizon in (1, 2, 5, 9):
            got = estimate_gamma(model, coords, horizon)
            want = oracles.repeated_measurement_information(1.0, sigma2, horizon)
            assert got == pytest.approx(want, abs=1e-9)

    def test_nondecreasing_in_horizon(self):
        model = self._model()
        coords = np.linspace(-1, 1, 6)[:, None]
        vals = [estimate_gamma(model, coords, h) for h in (1, 2, 4, 8)]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))

    def test_horizon_validation(self):
        with pytest.raises(ValueError):
            estimate_gamma(self._model(), np.array([[0.0]]), 0)


def _random_state(rng, shape=(4, 4), beta=1.0):
    n = len(shape)
    means = rng.normal(size=(n,) + shape)
    variances = rng.uniform(0.01, 1.0, size=(n,) + shape)
    return build_confidence_state(means, variances, np.full(n, beta)), means, variances


class TestConfidenceState:
    def test_midpoint_is_mean(self):
        rng = np.random.default_rng(0)
        state, means, _ = _random_state(rng)
        np.testing.assert_allclose((state.u_lo + state.u_hi) / 2, means, atol=1e-12)

    def test_beta_zero_collapses_to_plug_in(self):
        rng = np.random.default_rng(1)
        state, means, _ = _random_state(rng, beta=0.0)
        np.testing.assert_allclose(state.u_lo, means)
        for n in range(2):
            plug_in = np.max(means[n], axis=n, keepdims=True) - means[n]
            np.testing.assert_allclose(state.f_lo[n], plug_in, atol=1e-12)
            np.testing.assert_allclose(state.f_hi[n], plug_in, atol=1e-12)

    def test_interval_validity(self):
        rng = np.random.default_rng(2)
        state, _, _ = _random_state(rng)
        assert np.all(state.u_lo <= state.u_hi)
        assert np.all(state.f_lo <= state.f_hi)

    def test_width_bound(self):
        rng = np.random.default_rng(3)
        beta = 1.3
        state, _, variances = _random_state(rng, beta=beta)
        sds = np.sqrt(variances)
        for n in range(2):
            own_max_sd = np.max(sds[n], axis=n, keepdims=True)
            bound = 2 * beta * (sds[n] + own_max_sd)
            assert np.all(state.f_hi[n] - state.f_lo[n] <= bound + 1e-10)

    def test_optimistic_lower_bound_can_be_negative(self):
        rng = np.random.default_rng(4)
        state, _, _ = _random_state(rng, beta=3.0)
        assert np.min(state.f_lo) < 0


class TestProfileSelection:
    def test_reported_matches_enumeration(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            state, _, _ = _random_state(rng)
            got = reported_profile(state)
            worst = state.f_lo.max(axis=0)
            best = min(
                (tuple(p) for p in np.ndindex(*worst.shape)),
                key=lambda p: (worst[p], p),
            )
            assert got == best

    def test_reported_shift_invariance(self):
        rng = np.random.default_rng(6)
        state, means, variances = _random_state(rng)
        shifted = build_confidence_state(means + 7.5, variances, state.beta)
        assert reported_profile(state) == reported_profile(shifted)

    def test_single_player_reduction(self):
        rng = np.random.default_rng(7)
        means = rng.normal(size=(1, 6))
        variances = rng.uniform(0.05, 0.5, size=(1, 6))
        state = build_confidence_state(means, variances, np.array([1.0]))
        got = reported_profile(state)
        assert got == (int(np.argmin(state.f_lo[0])),)

    def test_exploring_matches_enumeration(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            state, _, _ = _random_state(rng)
            reported = reported_profile(state)
            player, profile = exploring_profile(state, reported)
            assert player == int(np.argmax([state.f_hi[n][reported] for n in range(2)]))
            diffs = [i for i in range(2) if profile[i] != reported[i]]
            assert len(diffs) <= 1
            sl = list(reported)
            sl[player] = slice(None)
            best = int(np.argmax(state.u_hi[(player,) + tuple(sl)]))
            assert profile[player] == best

    def test_exploring_keeps_reported_when_already_best(self):
        means = np.zeros((2, 3, 3))
        means[0, 2, :] = 1.0  # player 0's best row is fixed
        means[1, :, 1] = 1.0
        variances = np.full((2, 3, 3), 1e-6)
        state = build_confidence_state(means, variances, np.zeros(2))
        reported = reported_profile(state)
        _, profile = exploring_profile(state, reported)
        assert profile == reported

    def test_worst_player_order(self):
        means = np.zeros((2, 2, 2))
        variances = np.full((2, 2, 2), 0.01)
        state = build_confidence_state(means, variances, np.array([2.0, 1.0]))
        reported = reported_profile(state)
        player, _ = exploring_profile(state, reported)
        assert player == 0  # wider band -> larger upper dissatisfaction

    def test_final_profile_prefers_higher_variance(self):
        means = np.zeros((2, 3, 3))
        variances = np.zeros((2, 3, 3))
        variances[:, 1, 1] = 0.5
        state = build_confidence_state(means, variances, np.ones(2))
        assert final_evaluation_profile(state, (0, 0), (1, 1)) == (1, 1)
        assert final_evaluation_profile(state, (1, 1), (0, 0)) == (1, 1)

    def test_final_profile_tie_goes_to_reported(self):
        means = np.zeros((2, 2, 2))
        variances = np.full((2, 2, 2), 0.3)
        state = build_confidence_state(means, variances, np.ones(2))
        assert final_evaluation_profile(state, (0, 1), (1, 0)) == (0, 1)

    def test_final_profile_identical_candidates(self):
        rng = np.random.default_rng(9)
        state, _, _ = _random_state(rng)
        assert final_evaluation_profile(state, (2, 2), (2, 2)) == (2, 2)

    def test_final_matches_direct_recomputation(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            state, _, _ = _random_state(rng)
            reported = reported_profile(state)
            _, exploring = exploring_profile(state, reported)
            got = final_evaluation_profile(state, reported, exploring)
            vr = max(state.var_top[n][reported] for n in range(2))
            ve = max(state.var_top[n][exploring] for n in range(2))
            assert got == (exploring if ve > vr else reported)
