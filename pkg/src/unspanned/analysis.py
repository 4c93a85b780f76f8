"""In-sample regressions: spanning of latent factors, explanatory gains, macro links."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .forecast import clark_west_differential, dm_test

DEFAULT_NW_LAGS = 12


class RankDeficient(np.linalg.LinAlgError):
    pass


@dataclass
class RegressionResult:
    coef: np.ndarray  # intercept first
    cov: np.ndarray  # Newey-West covariance
    resid: np.ndarray
    fitted: np.ndarray
    r2: float
    adj_r2: float
    nw_lags: int

    @property
    def a(self) -> float:
        return float(self.coef[0])

    @property
    def b(self) -> np.ndarray:
        return self.coef[1:]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def tstats(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.se

    @property
    def stars(self) -> list[str]:
        return [significance_stars(abs(t)) for t in self.tstats]


def significance_stars(abs_t: float) -> str:
    if abs_t > 2.576:
        return "***"
    if abs_t > 1.960:
        return "**"
    if abs_t > 1.645:
        return "*"
    return ""


def adjusted_r2(sse: float, sst: float, T: int, k: int) -> float:
    """1 - (SSE / (T - k)) / (SST / (T - 1)), k counting the intercept."""
    if sst == 0:
        return float("nan")
    return float(1.0 - (sse / (T - k)) / (sst / (T - 1)))


def newey_west_cov(X: np.ndarray, resid: np.ndarray, lags: int) -> np.ndarray:
    """Bartlett-kernel sandwich covariance; lags = 0 gives White's estimator."""
    T = X.shape[0]
    xu = X * resid[:, None]
    S = xu.T @ xu
    for j in range(1, min(lags, T - 1) + 1):
        g = xu[j:].T @ xu[:-j]
        S += (1.0 - j / (lags + 1.0)) * (g + g.T)
    bread = np.linalg.inv(X.T @ X)
    return bread @ S @ bread


def ols(y, X, nw_lags: int = DEFAULT_NW_LAGS, cond_cap: float = 1e12) -> RegressionResult:
    """Least squares of y on [1, X] with Newey-West inference."""
    y = np.asarray(y, float).ravel()
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.size:
        raise ValueError("y and X have different lengths")
    Xc = np.column_stack([np.ones(y.size), X])
    T, k = Xc.shape
    if T <= k:
        raise RankDeficient("not enough observations")
    scale = np.linalg.norm(Xc, axis=0)
    if np.any(scale == 0) or np.linalg.matrix_rank(Xc / scale) < k or np.linalg.cond(Xc / scale) > cond_cap:
        raise RankDeficient("regressors are collinear")
    coef, *_ = np.linalg.lstsq(Xc, y, rcond=None)
    fitted = Xc @ coef
    resid = y - fitted
    sse = float(resid @ resid)
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - sse / sst if sst > 0 else float("nan")
    return RegressionResult(coef, newey_west_cov(Xc, resid, nw_lags), resid, fitted, r2,
                            adjusted_r2(sse, sst, T, k), nw_lags)


@dataclass
class HiddenComponent:
    spanned: np.ndarray  # (T, d) E[Z | P]
    hidden: np.ndarray  # (T, d) residual
    regressions: list


def hidden_component(z, p, nw_lags: int = DEFAULT_NW_LAGS) -> HiddenComponent:
    """Split each latent series into its projection on P and the residual."""
    z = np.asarray(z, float)
    if z.ndim == 1:
        z = z[:, None]
    p = np.asarray(p, float)
    if z.shape[0] != p.shape[0]:
        raise ValueError("latent and factor series are not aligned")
    regs = [ols(z[:, j], p, nw_lags) for j in range(z.shape[1])]
    spanned = np.column_stack([r.fitted for r in regs])
    hidden = z - spanned
    return HiddenComponent(spanned, hidden, regs)


def spanning_table(z, p, names=None) -> list[dict]:
    """Adjusted R^2 of each latent series on the PCs."""
    z = np.asarray(z, float).reshape(len(p), -1)
    names = names or [f"Z[{j}]" for j in range(z.shape[1])]
    return [{"target": names[j], "adj_r2": ols(z[:, j], p, 0).adj_r2} for j in range(z.shape[1])]


def delta_r2_row(rx, p, z, h: int, nw_lags: int | None = None) -> dict:
    """Adjusted R^2 of rx on P, on [P, z], their difference and a CW p-value."""
    rx = np.asarray(rx, float)
    base = ols(rx, p, 0)
    X = np.column_stack([p, z])
    try:
        full = ols(rx, X, 0)
        fitted, adj, collinear = full.fitted, full.adj_r2, False
    except RankDeficient:
        # z adds nothing to the span: same fit, one more parameter charged
        sse = float(base.resid @ base.resid)
        sst = float(np.sum((rx - rx.mean()) ** 2))
        fitted, adj, collinear = base.fitted, adjusted_r2(sse, sst, rx.size, X.shape[1] + 1), True
    d = clark_west_differential(rx, fitted, base.fitted)
    lags = h if nw_lags is None else nw_lags
    try:
        stat, pval = dm_test(d, lags)
    except ZeroDivisionError:
        stat, pval = 0.0, 0.5
    return {"adj_r2_p": base.adj_r2, "adj_r2_pz": adj, "delta": adj - base.adj_r2,
            "cw_stat": stat, "cw_p": pval, "stars": _p_stars(pval), "collinear": collinear}


def _p_stars(p: float) -> str:
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.10:
        return "*"
    return ""


def delta_r2_table(y_panel, maturities, p, z, horizons, ns, interpolate: bool = False) -> list[dict]:
    """Rows per (horizon, maturity) over the sample covered by ``p``.

    rx_{t,t+h} is regressed on P_t and z_t for t = 0..T-h.
    """
    from .forecast import excess_return_series

    z = np.asarray(z, float).reshape(len(p), -1)
    rows = []
    for h in horizons:
        for n in ns:
            if n <= h:
                continue
            rx, flag = excess_return_series(y_panel, maturities, n, h, interpolate)
            row = delta_r2_row(rx, p[: len(rx)], z[: len(rx)], h)
            row.update({"n": n, "h": h, "interpolated": flag})
            rows.append(row)
    return rows


def macro_link_table(targets: dict, macro: np.ndarray, macro_names, groups: dict,
                     nw_lags: int = DEFAULT_NW_LAGS) -> list[dict]:
    """Regress each target series on each macro variable and group (intercept always included)."""
    macro = np.asarray(macro, float)
    specs = {name: [i] for i, name in enumerate(macro_names)}
    for g, members in groups.items():
        specs[g] = [list(macro_names).index(m) for m in members]
    rows = []
    for tname, series in targets.items():
        for sname, cols in specs.items():
            res = ols(series, macro[:, cols], nw_lags)
            rows.append({"target": tname, "regressors": sname, "adj_r2": res.adj_r2,
                         "signs": ["+" if b > 0 else "-" for b in res.b], "stars": res.stars[1:],
                         "tstats": res.tstats[1:].tolist(), "intercept_included": True})
    return rows


def load_macro_csv(path, dates=None, normalize_sign: dict | None = None):
    """Long-format CSV (date, name, value) to a (T, m) matrix aligned on ``dates``.

    ``normalize_sign`` maps a variable to a reference whose sample covariance
    with it is made positive by flipping its sign.
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    names = sorted({r["name"] for r in rows})
    all_dates = sorted({r["date"][:7] for r in rows}) if dates is None else [d[:7] for d in dates]
    pos = {d: i for i, d in enumerate(all_dates)}
    M = np.full((len(all_dates), len(names)), np.nan)
    for r in rows:
        d = r["date"][:7]
        if d in pos:
            M[pos[d], names.index(r["name"])] = float(r["value"])
    for var, ref in (normalize_sign or {}).items():
        i, j = names.index(var), names.index(ref)
        ok = np.isfinite(M[:, i]) & np.isfinite(M[:, j])
        if np.cov(M[ok, i], M[ok, j])[0, 1] < 0:
            M[:, i] = -M[:, i]
    return all_dates, names, M
