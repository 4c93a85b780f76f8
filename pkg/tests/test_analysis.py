import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import normal_equations
from unspanned.analysis import (
    RankDeficient, adjusted_r2, delta_r2_row, delta_r2_table, hidden_component, load_macro_csv,
    macro_link_table, newey_west_cov, ols, significance_stars, spanning_table,
)


def test_exact_fit():
    x = np.arange(10.0)
    res = ols(2.0 + 3.0 * x, x)
    np.testing.assert_allclose(res.coef, [2.0, 3.0], atol=1e-12)
    assert res.r2 == pytest.approx(1.0)
    np.testing.assert_allclose(res.resid, 0, atol=1e-12)


def test_three_point_hand_fixture():
    # y = (1, 2, 2) on x = (0, 1, 2): slope 1/2, intercept 7/6
    res = ols([1.0, 2.0, 2.0], [0.0, 1.0, 2.0], nw_lags=0)
    np.testing.assert_allclose(res.coef, [7 / 6, 0.5])
    np.testing.assert_allclose(res.r2, 0.75)
    np.testing.assert_allclose(res.adj_r2, 1 - (1 / 6) / (2 / 3 / 2))


def test_orthogonal_regressor_has_zero_slope():
    x = np.array([1.0, -1.0, 1.0, -1.0])
    y = np.array([1.0, 1.0, 3.0, 3.0])
    res = ols(y, x)
    assert abs(res.b[0]) < 1e-14
    assert res.r2 == pytest.approx(0.0, abs=1e-14)


@given(arrays(float, (30, 3), elements=st.floats(-10, 10)), arrays(float, 30, elements=st.floats(-10, 10)))
def test_matches_normal_equations_and_orthogonality(X, y):
    try:
        res = ols(y, X, cond_cap=1e6)
    except RankDeficient:
        return
    Xc = np.column_stack([np.ones(30), X])
    # fitted values are well determined even when a tiny column makes a coefficient loose
    scale = max(1.0, np.abs(y).max()) * np.abs(Xc).max()
    np.testing.assert_allclose(res.fitted, Xc @ normal_equations(y, X), atol=1e-7 * scale)
    assert np.all(np.abs(Xc.T @ res.resid) < 1e-8 * scale * 30)


def test_white_covariance_at_lag_zero():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(50), rng.standard_normal(50)])
    e = rng.standard_normal(50)
    bread = np.linalg.inv(X.T @ X)
    meat = sum(e[i] ** 2 * np.outer(X[i], X[i]) for i in range(50))
    np.testing.assert_allclose(newey_west_cov(X, e, 0), bread @ meat @ bread, rtol=1e-12)
    assert np.all(np.linalg.eigvalsh(newey_west_cov(X, e, 6)) > 0)


def test_rank_deficiency():
    x = np.arange(10.0)
    with pytest.raises(RankDeficient):
        ols(x, np.column_stack([x, 2 * x]))
    with pytest.raises(RankDeficient):
        ols(x[:2], x[:2])
    with pytest.raises(ValueError):
        ols(x, x[:-1])


def test_stars_and_adjusted_r2():
    assert [significance_stars(t) for t in (3.0, 2.0, 1.7, 1.0)] == ["***", "**", "*", ""]
    assert adjusted_r2(1.0, 4.0, 11, 2) == pytest.approx(1 - (1 / 9) / (4 / 10))
    assert np.isnan(adjusted_r2(0.0, 0.0, 10, 2))


def test_hidden_component_identities():
    rng = np.random.default_rng(1)
    p = rng.standard_normal((200, 3))
    z = p @ [0.5, -1.0, 0.2] + rng.standard_normal(200)
    hc = hidden_component(z, p)
    np.testing.assert_allclose(hc.spanned + hc.hidden, z[:, None], atol=1e-12)
    Pc = np.column_stack([np.ones(200), p])
    np.testing.assert_allclose(Pc.T @ hc.hidden, 0, atol=1e-10)
    # projecting again leaves the hidden part unchanged
    again = hidden_component(hc.hidden, p)
    np.testing.assert_allclose(again.hidden, hc.hidden, atol=1e-12)
    with pytest.raises(ValueError):
        hidden_component(z[:-1], p)


def test_spanning_table():
    rng = np.random.default_rng(2)
    p = rng.standard_normal((100, 3))
    rows = spanning_table(np.column_stack([p[:, 0], rng.standard_normal(100)]), p, ["a", "b"])
    assert rows[0]["target"] == "a" and rows[0]["adj_r2"] == pytest.approx(1.0)
    assert rows[1]["adj_r2"] < 0.1


def test_delta_r2_cases():
    rng = np.random.default_rng(3)
    T = 300
    p = rng.standard_normal((T, 3))
    z = rng.standard_normal(T)
    rx = p @ [0.3, 0.1, 0.0] + 0.5 * z + 0.5 * rng.standard_normal(T)
    planted = delta_r2_row(rx, p, z, 1)
    assert planted["delta"] > 0.1 and planted["cw_p"] < 0.01 and planted["stars"] == "***"
    zero = delta_r2_row(rx, p, np.zeros(T), 1)
    assert zero["collinear"] and zero["delta"] < 0 and zero["cw_p"] == 0.5
    col = delta_r2_row(rx, p, p[:, 1], 1)
    assert col["collinear"]
    np.testing.assert_allclose(col["adj_r2_pz"], zero["adj_r2_pz"])


def test_delta_r2_table_shapes():
    rng = np.random.default_rng(4)
    mats = (1, 11, 12, 23, 24)
    y = rng.normal(0.003, 1e-3, (80, 5))
    p = rng.standard_normal((80, 3))
    rows = delta_r2_table(y, mats, p, rng.standard_normal(80), [1, 12], [12, 24])
    assert [(r["h"], r["n"]) for r in rows] == [(1, 12), (1, 24), (12, 24)]


def test_macro_table_and_csv(tmp_path):
    rng = np.random.default_rng(5)
    dates = [f"2000-{m:02d}" for m in range(1, 13)] + [f"2001-{m:02d}" for m in range(1, 13)]
    a = rng.standard_normal(24)
    b = -a + 0.1 * rng.standard_normal(24)
    lines = ["date,name,value"]
    for i, d in enumerate(dates):
        lines += [f"{d}-01,ip,{float(a[i])!r}", f"{d}-01,unemp,{float(b[i])!r}"]
    (tmp_path / "m.csv").write_text("\n".join(lines) + "\n")
    got_dates, names, M = load_macro_csv(tmp_path / "m.csv", normalize_sign={"unemp": "ip"})
    assert got_dates == dates and names == ["ip", "unemp"]
    np.testing.assert_allclose(M[:, 1], -b)
    _, _, M2 = load_macro_csv(tmp_path / "m.csv", dates=dates[:3] + ["1999-01"])
    assert np.isnan(M2[3]).all()
    rows = macro_link_table({"z": 2 * a + 0.1 * rng.standard_normal(24)}, M, names, {"real": ["ip", "unemp"]}, 2)
    assert [r["regressors"] for r in rows] == ["ip", "unemp", "real"]
    assert rows[0]["signs"] == ["+"] and rows[0]["stars"] == ["***"]
    assert len(rows[2]["signs"]) == 2 and all(r["intercept_included"] for r in rows)
