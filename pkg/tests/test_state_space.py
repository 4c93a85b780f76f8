import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import multivariate_normal

from oracles import random_dynamics, stacked_latent_loglik, var1_loglik
from unspanned.state_space import (
    KalmanState, LatentSpec, NumericalFailure, PDynamics, dense_loglik, filtered_latent, fit_latent_scale,
    initial_state, kalman_loglik, kalman_loglik_reference, kalman_step, latent_predictive_draw,
    sigma_z_from_c,
)

MASKS = [(False, True, False), (True, False, False), (True, True, False), (True, True, True)]


def _setup(seed, T, mask=(False, True, False)):
    rng = np.random.default_rng(seed)
    mu, phi, L = random_dynamics(rng)
    d = sum(mask)
    phi_z = rng.uniform(-0.95, 0.95, d)
    sigma_z = rng.uniform(0.2, 2.0, d) * 1e-3
    p = np.cumsum(rng.normal(0, 1e-3, (T + 1, 3)), axis=0)
    return p, PDynamics(mu, phi, L), LatentSpec(phi_z, sigma_z, mask)


@given(st.integers(0, 10_000), st.integers(1, 20), st.sampled_from(MASKS))
def test_filter_matches_stacked_gaussian(seed, T, mask):
    p, dyn, lat = _setup(seed, T, mask)
    ll, _ = kalman_loglik(p, dyn, lat)
    ref = stacked_latent_loglik(p, dyn.mu_p, dyn.phi_p, dyn.sigma_p, lat.phi_z, lat.sigma_z, mask)
    assert abs(ll - ref) <= 1e-8 * abs(ref)


@given(st.integers(0, 10_000), st.integers(1, 12))
def test_three_filter_routes_agree(seed, T):
    p, dyn, lat = _setup(seed, T, (True, False, True))
    batched, st_b = kalman_loglik(p, dyn, lat)
    textbook, st_t = kalman_loglik_reference(p, dyn, lat)
    dense = dense_loglik(p, dyn, lat)
    np.testing.assert_allclose(batched, textbook, rtol=1e-10)
    np.testing.assert_allclose(batched, dense, rtol=1e-9)
    np.testing.assert_allclose(st_b.a_filt, st_t.a_filt, rtol=1e-7, atol=1e-14)
    np.testing.assert_allclose(st_b.p_filt, st_t.p_filt, rtol=1e-7, atol=1e-18)


def test_zero_latent_variance_is_plain_gaussian():
    p, dyn, _ = _setup(3, 5)
    lat = LatentSpec([0.7], [0.0], (False, True, False))
    state = initial_state(lat)
    for t in range(1, 6):
        s = p[t] - dyn.mu_p - dyn.phi_p @ p[t - 1]
        state, ll = kalman_step(state, p[t - 1], p[t], dyn, lat)
        np.testing.assert_allclose(ll, multivariate_normal(np.zeros(3), dyn.cov).logpdf(s), rtol=1e-12)


def test_iid_latent_collapses_prediction():
    p, dyn, _ = _setup(4, 6)
    sz = np.array([1.3e-3])
    lat = LatentSpec([0.0], sz, (False, True, False))
    F = dyn.cov + np.diag([0.0, sz[0] ** 2, 0.0])
    state = initial_state(lat)
    for t in range(1, 7):
        s = p[t] - dyn.mu_p - dyn.phi_p @ p[t - 1]
        state, ll = kalman_step(state, p[t - 1], p[t], dyn, lat)
        np.testing.assert_allclose(ll, multivariate_normal(np.zeros(3), F).logpdf(s), rtol=1e-12)
        # next prediction a_{t+1} = phi_z a_{t|t} = 0
        assert np.all(lat.phi_z * state.a_filt == 0.0)


def test_single_period_equals_one_step():
    p, dyn, lat = _setup(5, 1)
    total, final = kalman_loglik(p, dyn, lat)
    state, ll = kalman_step(initial_state(lat), p[0], p[1], dyn, lat)
    np.testing.assert_allclose(total, ll, rtol=1e-12)
    np.testing.assert_allclose(final.a_filt, state.a_filt, rtol=1e-10)


def test_latent_slot_symmetry():
    rng = np.random.default_rng(8)
    a, b = 1e-4, -2e-4
    mu = np.array([a, a, b])
    phi = np.array([[0.8, 0.1, 0.05], [0.1, 0.8, 0.05], [0.02, 0.02, 0.6]])
    L = np.diag([1e-3, 1e-3, 4e-4])
    dyn = PDynamics(mu, phi, L)
    lat1 = LatentSpec([0.9], [5e-4], (True, False, False))
    lat2 = LatentSpec([0.9], [5e-4], (False, True, False))
    p = rng.normal(0, 1e-3, (30, 3))
    swapped = p[:, [1, 0, 2]]
    np.testing.assert_allclose(kalman_loglik(p, dyn, lat1)[0], kalman_loglik(swapped, dyn, lat2)[0], rtol=1e-12)
    p[:, 1] = p[:, 0]
    np.testing.assert_allclose(kalman_loglik(p, dyn, lat1)[0], kalman_loglik(p, dyn, lat2)[0], rtol=1e-12)


@given(st.integers(0, 10_000))
def test_covariance_psd_and_information_monotone(seed):
    p, dyn, lat = _setup(seed, 15, (True, True, False))
    state = initial_state(lat)
    for t in range(1, 16):
        pred = np.diag(lat.phi_z) @ state.p_filt @ np.diag(lat.phi_z) + np.diag(lat.sigma_z ** 2)
        state, _ = kalman_step(state, p[t - 1], p[t], dyn, lat)
        np.testing.assert_allclose(state.p_filt, state.p_filt.T, atol=0)
        assert np.linalg.eigvalsh(state.p_filt).min() >= -1e-10 * np.abs(pred).max()
        assert np.trace(state.p_filt) <= np.trace(pred) * (1 + 1e-12)


def test_no_latent_reduces_to_var1():
    p, dyn, _ = _setup(9, 25)
    lat = LatentSpec(np.zeros(0), np.zeros(0), (False, False, False))
    ll, _ = kalman_loglik(p, dyn, lat)
    np.testing.assert_allclose(ll, var1_loglik(p, dyn.mu_p, dyn.phi_p, dyn.cov), rtol=1e-11)


def test_non_pd_innovation_raises():
    dyn = PDynamics(np.zeros(3), np.zeros((3, 3)), np.diag([1e-3, 0.0, 1e-3]))
    lat = LatentSpec([0.5], [0.0], (True, False, False))
    with pytest.raises(NumericalFailure):
        kalman_step(initial_state(lat), np.zeros(3), np.ones(3), dyn, lat)


def test_latent_spec_validation():
    with pytest.raises(ValueError):
        LatentSpec([1.0], [1e-3], (True, False, False))
    with pytest.raises(ValueError):
        LatentSpec([0.5], [-1e-3], (True, False, False))
    with pytest.raises(ValueError):
        LatentSpec([0.5, 0.4], [1e-3, 1e-3], (True, False, False))


def test_filtered_latent_is_phi_times_filtered_mean():
    p, dyn, lat = _setup(10, 8)
    path = filtered_latent(p, dyn, lat)
    state = initial_state(lat)
    for t in range(1, 9):
        state, _ = kalman_step(state, p[t - 1], p[t], dyn, lat)
        np.testing.assert_allclose(path[t - 1], lat.phi_z * state.a_filt, rtol=1e-8, atol=1e-16)


# ---------------------------------------------------------------------------
# predictive draws


def test_degenerate_draw_is_deterministic(rng):
    mu, phi, _ = random_dynamics(rng)
    dyn = PDynamics(mu, phi, np.zeros((3, 3)))
    lat = LatentSpec([0.8], [0.0], (False, True, False))
    state = KalmanState(np.array([2e-3]), np.zeros((1, 1)))
    p_t = rng.normal(0, 1e-3, 3)
    out = latent_predictive_draw(state, p_t, dyn, lat, rng)
    expected = mu + phi @ p_t + np.array([0.0, 0.8 * 2e-3, 0.0])
    np.testing.assert_allclose(out, expected, rtol=1e-13)


def test_predictive_moments(rng):
    mu, phi, L = random_dynamics(rng)
    dyn = PDynamics(mu, phi, L)
    lat = LatentSpec([0.7], [6e-4], (False, True, False))
    state = KalmanState(np.array([1e-3]), np.array([[4e-7]]))
    p_t = rng.normal(0, 1e-3, 3)
    n = 100_000
    draws = latent_predictive_draw(KalmanState(np.broadcast_to(state.a_filt, (n, 1)),
                                               np.broadcast_to(state.p_filt, (n, 1, 1))),
                                   p_t, dyn, lat, np.random.default_rng(1))
    mean = mu + phi @ p_t + np.array([0.0, 0.7e-3, 0.0])
    cov = L @ L.T
    cov[1, 1] += 0.49 * 4e-7 + 6e-4 ** 2
    se = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 4 * se)
    emp = np.cov(draws, rowvar=False)
    # s.e. of a sample covariance entry: sqrt((s_ii s_jj + s_ij^2) / n)
    se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / n)
    assert np.all(np.abs(emp - cov) < 4 * se_cov)


def test_multi_step_draw_reuses_one_trajectory():
    dyn = PDynamics(np.zeros(3), np.eye(3) * 0.5, np.zeros((3, 3)))
    lat = LatentSpec([0.5], [0.0], (True, False, False))
    state = KalmanState(np.array([1.0]), np.zeros((1, 1)))
    out = latent_predictive_draw(state, np.zeros(3), dyn, lat, np.random.default_rng(0), horizon=2)
    # alpha_1 = 0.5, P_1 = (0.5, 0, 0); alpha_2 = 0.25, P_2 = 0.5 * 0.5 + 0.25
    np.testing.assert_allclose(out, [0.5, 0.0, 0.0])


# ---------------------------------------------------------------------------
# Sigma_Z parameterisation and tuning


def test_sigma_z_scaling():
    var = np.array([1.0, 4.0, 9.0])
    np.testing.assert_array_equal(sigma_z_from_c(0.0, [0.3], var, (False, True, False)), [0.0])
    np.testing.assert_allclose(sigma_z_from_c(0.5, [0.0, 0.0], var, (True, False, True)), [0.5, 1.5])
    np.testing.assert_allclose(sigma_z_from_c(0.5, [0.6], var, (False, True, False)), [0.5 * np.sqrt(0.64 * 4)])


def test_fit_latent_scale_on_residuals():
    # residuals simulated straight from the latent model at known (phi, c)
    rng = np.random.default_rng(3)
    T, phi, c = 3000, 0.9, 0.6
    C = np.diag([1.0, 1.0, 1.0]) * 1e-6
    sz = c * np.sqrt((1 - phi ** 2) * C[1, 1] / (1 - c ** 2))
    alpha = np.zeros(T + 1)
    alpha[0] = rng.normal(0, sz / np.sqrt(1 - phi ** 2))
    for t in range(1, T + 1):
        alpha[t] = phi * alpha[t - 1] + sz * rng.standard_normal()
    s = rng.normal(0, 1e-3, (T, 3))
    s[:, 1] += alpha[1:]
    rec = fit_latent_scale(s, np.sqrt(C), (False, True, False), np.random.default_rng(0))
    assert abs(rec.c / c - 1) < 0.15
    assert abs(rec.phi_z_init[0] - phi) < 0.05


def test_tuning_record_json_round_trip():
    from unspanned.state_space import TuningRecord

    rec = TuningRecord(np.array([1e-4]), np.array([0.9]), 0.5, -12.5, (False, True, False))
    back = TuningRecord.from_json(rec.to_json())
    np.testing.assert_array_equal(back.sigma_z, rec.sigma_z)
    assert back.c == rec.c and back.mask == rec.mask


def test_tune_sigma_z_recovers_c():
    from unspanned.simulate import default_truth, simulate_panel
    from unspanned.state_space import tune_sigma_z

    c = 0.6
    truth = default_truth(c=c, phi_z=0.9)
    rel = []
    for s in range(20):
        sim = simulate_panel(truth, 276, seed=5000 + s)
        rec = tune_sigma_z(sim.model_data(), truth.spec, np.random.default_rng(s))
        rel.append(abs(rec.c / c - 1))
    rel = np.array(rel)
    print(f"c recovery: median rel. error {np.median(rel):.3f}, within 25%: {np.mean(rel < 0.25):.2f}")
    assert np.mean(rel < 0.25) >= 0.9
