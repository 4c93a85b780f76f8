from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from unspanned.forecast import (
    ExcessReturnSample, ForecastSeries, Forecaster, MaturityError, clark_west_differential, dm_test, eh_benchmark,
    excess_return_series, model_excess_return, newey_west_lrv, observed_excess_return, predict_excess_returns,
    r2_os, yield_column,
)
from unspanned.inference import AtsmModel, theta_dynamics, to_unconstrained
from unspanned.simulate import default_truth, simulate_panel


@pytest.fixture(scope="module")
def world():
    truth = default_truth()
    sim = simulate_panel(truth, 120, seed=11)
    data = sim.model_data()
    model = AtsmModel(truth.spec, data, truth.sigma_z)
    x = to_unconstrained(truth.theta, model.layout)
    return truth, sim, model, x


def test_excess_return_hand_value():
    # 24-month bond held 12 months: -12 y12_{t+12} + 24 y24_t - 12 y12_t
    y24, y12_later, y12 = 0.03 / 12, 0.025 / 12, 0.02 / 12
    rx = observed_excess_return(y24, y12_later, y12, 24, 12)
    np.testing.assert_allclose(rx, -12 * y12_later + 24 * y24 - 12 * y12, rtol=1e-15)
    np.testing.assert_allclose(rx, 0.015, rtol=1e-12)


def test_excess_return_edge_cases():
    assert observed_excess_return(0.01, 0.5, 0.01, 12, 12) == 0
    with pytest.raises(ValueError):
        observed_excess_return(0.01, 0.01, 0.01, 6, 12)


@given(st.floats(-0.01, 0.02), st.integers(2, 120), st.integers(1, 60))
def test_flat_unchanged_curve_earns_nothing(level, n, h):
    if h >= n:
        return
    assert abs(observed_excess_return(level, level, level, n, h)) < 1e-15


def test_excess_return_series_alignment():
    rng = np.random.default_rng(0)
    mats = (1, 2, 3, 6)
    y = rng.normal(0.002, 1e-3, (30, 4))
    rx, flag = excess_return_series(y, mats, 6, 3)
    assert not flag and rx.shape == (27,)
    t = 5
    np.testing.assert_allclose(rx[t], -3 * y[t + 3, 2] + 6 * y[t, 3] - 3 * y[t, 2])
    with pytest.raises(MaturityError):
        excess_return_series(y, mats, 5, 1)
    rx5, flag = excess_return_series(y, mats, 5, 1, interpolate=True)
    assert flag
    col, _ = yield_column(y, mats, 5, True)
    np.testing.assert_allclose(col, y[:, 2] + (2 / 3) * (y[:, 3] - y[:, 2]))
    with pytest.raises(MaturityError):
        yield_column(y, mats, 12, True)


def test_eh_benchmark():
    assert eh_benchmark([1, 2, 3]) == 2
    with pytest.raises(ValueError):
        eh_benchmark([])


def test_r2_os_identities():
    rng = np.random.default_rng(1)
    r, b = rng.standard_normal(50), rng.standard_normal(50)
    assert r2_os(r, r, b) == 1.0
    assert r2_os(r, b, b) == 0.0
    m = rng.standard_normal(50)
    np.testing.assert_allclose(r2_os(r, m, b), 1 - np.sum((r - m) ** 2) / np.sum((r - b) ** 2))
    with pytest.raises(ZeroDivisionError):
        r2_os(b, m, b)
    with pytest.raises(ValueError):
        r2_os(r, m[:-1], b)


def test_newey_west_hand_computation():
    x = np.array([1.0, -1.0, 2.0, 0.0])
    d = x - x.mean()
    g0 = d @ d / 4
    g1 = d[1:] @ d[:-1] / 4
    np.testing.assert_allclose(newey_west_lrv(x, 0), g0)
    np.testing.assert_allclose(newey_west_lrv(x, 1), g0 + 2 * 0.5 * g1)


def test_dm_by_hand_and_antisymmetry():
    rng = np.random.default_rng(2)
    d = rng.normal(0.3, 1.0, 200)
    stat, p = dm_test(d, 0)
    np.testing.assert_allclose(stat, d.mean() / np.sqrt(d.var() / d.size))
    from scipy.stats import norm
    np.testing.assert_allclose(p, norm.sf(stat))
    s2, p2 = dm_test(-d, 3)
    s3, _ = dm_test(d, 3)
    np.testing.assert_allclose(s2, -s3)
    assert dm_test(np.zeros(20), 3) == (0.0, 0.5)
    with pytest.raises(ValueError):
        dm_test(d[:5], 1)


def test_clark_west_identical_forecasts():
    r = np.arange(12.0)
    f = np.ones(12)
    d = clark_west_differential(r, f, f)
    np.testing.assert_array_equal(d, 0)


def test_sample_point_and_validation():
    s = ExcessReturnSample(24, 12, [1.0, 3.0], [1.0, 3.0])
    assert s.point == 2.5
    with pytest.raises(ValueError):
        ExcessReturnSample(24, 12, [1.0], [0.0])
    with pytest.raises(ValueError):
        ExcessReturnSample(24, 12, [1.0, 2.0], [1.0])


def _cloud(model, x, n, t):
    xs = np.repeat(x[None], n, axis=0)
    parts = model.initial_particles(xs, np.full(n, 1.6e-9), t)
    return parts


def test_n_equals_h_gives_zero(world):
    _, sim, model, x = world
    parts = _cloud(model, x, 3, 50)
    s = predict_excess_returns(model, parts, np.zeros(3), sim.p[50], 12, 12, np.random.default_rng(0))
    np.testing.assert_array_equal(s.draws, 0)


def test_model_return_matches_priced_yields(world):
    # route 1: loadings combined into the excess return; route 2: price yields then difference them
    truth, sim, model, x = world
    n, h, t = 36, 12, 40
    dyn, lp, _ = theta_dynamics(truth.theta, truth.weights, (h, n - h, n))
    yt = lp.a_p + lp.b_p @ sim.p[t]
    yth = lp.a_p + lp.b_p @ sim.p[t + h]
    expect = observed_excess_return(yt[2], yth[1], yt[0], n, h)
    got = model_excess_return(model, x, sim.p[t], sim.p[t + h], n, h)
    np.testing.assert_allclose(got, expect, rtol=1e-10, atol=1e-14)


def test_predictive_gaussian_moments(world):
    truth, sim, model, x = world
    n, h, t, N = 60, 1, 70, 100_000
    parts = _cloud(model, x, N, t)
    s = predict_excess_returns(model, parts, np.zeros(N), sim.p[t], n, h, np.random.default_rng(3))
    # exact moments: rx is affine in P_{t+1}, which is Gaussian given the filter state
    dyn, lp, _ = theta_dynamics(truth.theta, truth.weights, (h, n - h, n))
    a_pr, b_pr = lp.price_loadings()
    phi, sz = truth.theta.phi_z[0], truth.sigma_z[0]
    k = truth.spec.latent_index[0]
    mean_p = dyn.mu_p + dyn.phi_p @ sim.p[t]
    mean_p[k] += phi * parts.a_f[0, 0]
    cov_p = dyn.sigma_p @ dyn.sigma_p.T
    cov_p[k, k] += phi ** 2 * parts.p_f[0, 0, 0] + sz ** 2
    const = a_pr[1] - a_pr[2] + a_pr[0] - (b_pr[2] - b_pr[0]) @ sim.p[t]
    mu = const + b_pr[1] @ mean_p
    sd = np.sqrt(b_pr[1] @ cov_p @ b_pr[1])
    assert abs(s.draws.mean() - mu) < 4 * sd / np.sqrt(N)
    assert abs(s.draws.std() / sd - 1) < 4 * np.sqrt(0.5 / N)


def test_point_forecast_invariant_to_weight_shift(world):
    _, sim, model, x = world
    parts = _cloud(model, x, 20, 60)
    lw = np.linspace(-3, 0, 20)
    a = predict_excess_returns(model, parts, lw, sim.p[60], 24, 3, np.random.default_rng(5))
    b = predict_excess_returns(model, parts, lw + 700.0, sim.p[60], 24, 3, np.random.default_rng(5))
    np.testing.assert_allclose(a.point, b.point, rtol=1e-12)


def test_forecaster_origins_and_benchmark(world):
    _, sim, model, x = world
    fc = Forecaster(model, [(24, 12), (60, 1)], seed=0, t_last=80)
    for t in (5, 12, 13, 68, 69):
        parts = _cloud(model, x, 10, t)
        fc(SimpleNamespace(t=t, particles=parts, logw=np.zeros(10)))
    s12 = fc.series[(24, 12)]
    # an origin needs t - h >= 1 so the benchmark has a completed return
    assert s12.origins == [13, 68]
    rx = fc.rx[(24, 12)]
    np.testing.assert_allclose(s12.eh_point, [rx[:2].mean(), rx[:57].mean()])
    np.testing.assert_allclose(s12.realized, rx[[13, 68]])
    assert fc.series[(60, 1)].origins == [5, 12, 13, 68, 69]
    assert '"n": 24' in s12.to_json()


def test_forecast_series_evaluate(tmp_path):
    rng = np.random.default_rng(6)
    fs = ForecastSeries(24, 1)
    for t in range(40):
        r = rng.standard_normal()
        fs.add(t, r, ExcessReturnSample(24, 1, [0.5 * r], [1.0]), 0.0)
    ev = fs.evaluate()
    assert ev["count"] == 40 and ev["r2_os_vs_eh"] > 0.5 and ev["cw_p_vs_eh"] < 0.01
    fs.write_csv(tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "t,realized,model_point,eh_point"
