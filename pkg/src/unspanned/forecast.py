"""Excess-return forecasts, the historical-mean benchmark and their comparison."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .inference import AtsmModel, AtsmParticles, from_unconstrained, theta_dynamics
from .state_space import KalmanState, LatentSpec, latent_predictive_draw


class MaturityError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


# ---------------------------------------------------------------------------
# realised excess returns


def observed_excess_return(y_n_t, y_nmh_th, y_h_t, n: int, h: int):
    """-(n-h) y^{n-h}_{t+h} + n y^n_t - h y^h_t, all in per-month units."""
    if n < h or h < 1:
        raise ValueError("need n >= h >= 1")
    if n == h:
        return np.zeros(np.broadcast_shapes(np.shape(y_n_t), np.shape(y_h_t)))
    return -(n - h) * np.asarray(y_nmh_th) + n * np.asarray(y_n_t) - h * np.asarray(y_h_t)


def yield_column(y: np.ndarray, maturities, m: int, interpolate: bool = False) -> tuple[np.ndarray, bool]:
    """Column of maturity ``m``; linear interpolation in maturity if allowed."""
    mats = list(maturities)
    if m in mats:
        return y[..., mats.index(m)], False
    if not interpolate:
        raise MaturityError(f"maturity {m} not on the grid {mats} and interpolation is disabled")
    if m < mats[0] or m > mats[-1]:
        raise MaturityError(f"maturity {m} outside the grid")
    j = int(np.searchsorted(mats, m))
    w = (m - mats[j - 1]) / (mats[j] - mats[j - 1])
    return (1 - w) * y[..., j - 1] + w * y[..., j], True


def excess_return_series(y: np.ndarray, maturities, n: int, h: int, interpolate: bool = False):
    """rx_{t,t+h} for t = 0..T-h from a (T+1, J) panel; returns (series, interpolated flag)."""
    yn, f1 = yield_column(y, maturities, n, interpolate)
    yh, f2 = yield_column(y, maturities, h, interpolate)
    if n == h:
        return np.zeros(len(y) - h), f1 or f2
    ynh, f3 = yield_column(y, maturities, n - h, interpolate)
    return observed_excess_return(yn[:-h], ynh[h:], yh[:-h], n, h), f1 or f2 or f3


def eh_benchmark(history) -> float:
    """Expanding mean of completed excess returns."""
    history = np.asarray(history, float)
    if history.size == 0:
        raise ValueError("no completed holding period in the history")
    return float(history.mean())


# ---------------------------------------------------------------------------
# model predictions


@dataclass
class ExcessReturnSample:
    n: int
    h: int
    draws: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.draws = np.asarray(self.draws, float)
        self.weights = np.asarray(self.weights, float)
        if self.draws.shape != self.weights.shape:
            raise ValueError("draws and weights differ in shape")
        if not self.weights.sum() > 0:
            raise ValueError("weights sum to zero")

    @property
    def point(self) -> float:
        return float(np.sum(self.weights * self.draws) / np.sum(self.weights))


def price_loadings(model: AtsmModel, x: np.ndarray, maturities):
    """Log-price loadings (-m A_m, -m B_m) and P dynamics for each particle."""
    theta = from_unconstrained(x, model.layout)
    dyn, lp, valid = theta_dynamics(theta, model.data.weights, maturities)
    a_pr, b_pr = lp.price_loadings()
    return a_pr, b_pr, dyn, theta, valid


def predict_excess_returns(model: AtsmModel, particles: AtsmParticles, logw: np.ndarray, p_t: np.ndarray,
                           n: int, h: int, rng: np.random.Generator) -> ExcessReturnSample:
    """One predictive draw of rx_{t,t+h} per particle.

    P_{t+h} is drawn by iterating the latent predictive step h times along a
    single trajectory; loadings are exact for any maturity so no observed
    yield is needed.
    """
    if n < h or h < 1:
        raise ValueError("need n >= h >= 1")
    w = np.exp(logw - np.max(logw))
    if n == h:
        return ExcessReturnSample(n, h, np.zeros(len(w)), w)
    a, b, dyn, theta, valid = price_loadings(model, particles.x, (h, n - h, n))
    lat = LatentSpec(np.where(valid[:, None], theta.phi_z, 0.0),
                     np.zeros(model.spec.n_latent) if model.sigma_z is None else model.sigma_z,
                     model.spec.latent_mask)
    state = KalmanState(particles.a_f, particles.p_f, particles.t)
    with np.errstate(all="ignore"):
        p_next = latent_predictive_draw(state, p_t, dyn, lat, rng, horizon=h)
    p_t = np.asarray(p_t, float)
    rx = (a[:, 1] - a[:, 2] + a[:, 0] + np.einsum("ir,ir->i", b[:, 1], p_next)
          - np.einsum("ir,r->i", b[:, 2] - b[:, 0], p_t))
    ok = valid & np.isfinite(rx)
    return ExcessReturnSample(n, h, np.where(ok, rx, 0.0), np.where(ok, w, 0.0))


def model_excess_return(model: AtsmModel, x: np.ndarray, p_t, p_th, n: int, h: int) -> np.ndarray:
    """Excess return implied by the pricing loadings at realised factors."""
    a, b, _, _, _ = price_loadings(model, x, (h, n - h, n))
    return (a[..., 1] - a[..., 2] + a[..., 0] + np.einsum("...r,...r->...", b[..., 1, :], p_th)
            - np.einsum("...r,...r->...", b[..., 2, :] - b[..., 0, :], p_t))


# ---------------------------------------------------------------------------
# evaluation


def r2_os(realized, model, benchmark) -> float:
    """1 - SSE(model) / SSE(benchmark)."""
    realized, model, benchmark = (np.asarray(v, float) for v in (realized, model, benchmark))
    if realized.size == 0 or not realized.shape == model.shape == benchmark.shape:
        raise ValueError("series must be aligned and non-empty")
    sse_b = np.sum((realized - benchmark) ** 2)
    if sse_b == 0:
        raise ZeroDivisionError("benchmark has zero squared error")
    return float(1.0 - np.sum((realized - model) ** 2) / sse_b)


def clark_west_differential(realized, model, benchmark) -> np.ndarray:
    """e_b^2 - (e_m^2 - (f_b - f_m)^2) for each period."""
    realized, model, benchmark = (np.asarray(v, float) for v in (realized, model, benchmark))
    eb = realized - benchmark
    em = realized - model
    return eb ** 2 - (em ** 2 - (benchmark - model) ** 2)


def newey_west_lrv(x, lags: int) -> float:
    """Bartlett-kernel long-run variance of a demeaned series."""
    x = np.asarray(x, float)
    x = x - x.mean()
    T = x.size
    v = x @ x / T
    for j in range(1, min(lags, T - 1) + 1):
        v += 2.0 * (1.0 - j / (lags + 1.0)) * (x[j:] @ x[:-j]) / T
    return float(v)


def dm_test(d, lags: int) -> tuple[float, float]:
    """One-sided test that E[d] > 0 with a Newey-West standard error.

    Returns (statistic, p-value); a differential that is identically zero
    gives (0, 0.5).
    """
    d = np.asarray(d, float)
    if d.size < 10:
        raise ValueError("need at least 10 observations")
    if np.all(d == 0):
        return 0.0, 0.5
    lrv = newey_west_lrv(d, lags)
    if not lrv > 0:
        raise ZeroDivisionError("differential has zero long-run variance")
    stat = float(d.mean() / np.sqrt(lrv / d.size))
    return stat, float(norm.sf(stat))


def dm_cw_test(realized, model, benchmark, h: int) -> tuple[float, float]:
    return dm_test(clark_west_differential(realized, model, benchmark), h)


# ---------------------------------------------------------------------------
# collections of forecasts


@dataclass
class ForecastSeries:
    """Forecasts for one (maturity, horizon) over a sequence of origins."""

    n: int
    h: int
    origins: list = field(default_factory=list)
    realized: list = field(default_factory=list)
    model_point: list = field(default_factory=list)
    eh_point: list = field(default_factory=list)
    draws: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    interpolated: bool = False

    def add(self, t, realized, sample: ExcessReturnSample, eh, keep_draws=True):
        self.origins.append(int(t))
        self.realized.append(float(realized))
        self.model_point.append(sample.point)
        self.eh_point.append(float(eh))
        if keep_draws:
            self.draws.append(sample.draws)
            self.weights.append(sample.weights)

    def evaluate(self, other: "ForecastSeries | None" = None) -> dict:
        r, m, b = (np.asarray(v) for v in (self.realized, self.model_point, self.eh_point))
        out = {"n": self.n, "h": self.h, "count": int(r.size), "interpolated": self.interpolated,
               "r2_os_vs_eh": r2_os(r, m, b)}
        out["cw_stat_vs_eh"], out["cw_p_vs_eh"] = dm_cw_test(r, m, b, self.h)
        if other is not None:
            o = np.asarray(other.model_point)
            out["r2_os_vs_other"] = r2_os(r, m, o)
            out["cw_stat_vs_other"], out["cw_p_vs_other"] = dm_cw_test(r, m, o, self.h)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "realized", "model_point", "eh_point"])
            for row in zip(self.origins, self.realized, self.model_point, self.eh_point):
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "h": self.h, "origins": self.origins, "realized": self.realized,
                           "model_point": self.model_point, "eh_point": self.eh_point}, sort_keys=True)


class Forecaster:
    """Callback for the sequential sampler recording forecasts at each origin.

    At origin t the realised return rx_{t,t+h} is scored when t + h is inside
    the panel.  The benchmark averages returns completed by t.
    """

    def __init__(self, model: AtsmModel, pairs, seed: int, t_last: int | None = None,
                 interpolate: bool = False, keep_draws: bool = True):
        self.model = model
        self.seed = seed
        self.keep_draws = keep_draws
        y = model.data.y
        self.t_last = model.data.T if t_last is None else t_last
        self.series = {}
        self.rx = {}
        for n, h in pairs:
            rx, flag = excess_return_series(y, model.data.maturities, n, h, interpolate)
            self.rx[(n, h)] = rx
            self.series[(n, h)] = ForecastSeries(n, h, interpolated=flag)

    def __call__(self, cloud) -> None:
        from .smc import PURPOSE_PREDICT, stage_rng

        t = cloud.t
        for k, (n, h) in enumerate(self.series):
            if t + h > self.t_last or t - h < 1:
                continue
            rng = stage_rng(self.seed, t, k, PURPOSE_PREDICT)
            sample = predict_excess_returns(self.model, cloud.particles, cloud.logw,
                                            self.model.data.p[t], n, h, rng)
            rx = self.rx[(n, h)]
            eh = eh_benchmark(rx[: t - h + 1])
            self.series[(n, h)].add(t, rx[t], sample, eh, self.keep_draws)
