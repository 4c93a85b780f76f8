"""Power-utility allocation between a bond and the riskless asset.

The investor holds weight w in an n-period bond for h periods and 1 - w at
the riskless rate rf (a log return over the holding period).  Gross wealth
is (1 - w) e^{rf} + w e^{rf + rx}.  Because e^{rf} factors out, the optimal w
maximises sum_j omega_j (1 + w m_j)^{1-gamma} / (1 - gamma) with
m_j = e^{rx_j} - 1, which is what the solver works with.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .forecast import dm_test

logger = logging.getLogger(__name__)

GRID_POINTS = 256
GOLDEN_TOL = 1e-6
WEIGHT_CAP = 1e3
RETURN_FLOOR = 1e-4
RETURN_CEIL = 1e4
WEALTH_FLOOR = 1e-4
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class AllocationScenario:
    lower: float = -1.0
    upper: float = 2.0
    gamma: float = 5.0
    name: str = ""

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("lower bound must be below upper bound")
        if not self.gamma > 1:
            raise ValueError("gamma must exceed 1")

    @property
    def unbounded(self) -> bool:
        return not (np.isfinite(self.lower) and np.isfinite(self.upper))


SCENARIOS = (
    AllocationScenario(-1.0, 2.0, 5.0, "w in [-1, 2]"),
    AllocationScenario(-1.0, 5.0, 5.0, "w in [-1, 5]"),
    AllocationScenario(-np.inf, np.inf, 5.0, "unconstrained"),
)


@dataclass
class WeightChoice:
    w: float
    weight_capped: bool = False
    returns_truncated: bool = False


def _excess_gross(rx: np.ndarray, truncate: bool) -> tuple[np.ndarray, bool]:
    """m = e^{rx} - 1, optionally with e^{rx} clipped to [1e-4, 1e4]."""
    rx = np.asarray(rx, float)
    if not truncate:
        return np.expm1(rx), False
    lo, hi = math.log(RETURN_FLOOR), math.log(RETURN_CEIL)
    clipped = np.clip(rx, lo, hi)
    return np.expm1(clipped), bool(np.any(clipped != rx))


def expected_utility_gain(w, m: np.ndarray, omega: np.ndarray, gamma: float):
    """Sum omega [(1 + w m)^{1-gamma} - 1] / (1 - gamma) for scalar or array w.

    Equals the expected utility (up to the positive factor e^{rf(1-gamma)} and
    an additive constant) and is exactly zero at w = 0.  Infeasible w, where
    wealth is non-positive in some state, map to -inf.
    """
    w = np.asarray(w, float)
    z = 1.0 + w[..., None] * m
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        val = np.expm1((1.0 - gamma) * np.log1p(w[..., None] * m)) / (1.0 - gamma)
        out = np.sum(omega * val, axis=-1)
    return np.where(np.all(z > 0, axis=-1), out, -np.inf)


def feasible_interval(m: np.ndarray, lower: float, upper: float) -> tuple[float, float]:
    """Closed interval inside [lower, upper] on which wealth stays positive."""
    pos, neg = m[m > 0], m[m < 0]
    lo = -1.0 / pos.max() if pos.size else -np.inf
    hi = -1.0 / neg.min() if neg.size else np.inf
    shrink = lambda v, s: v - s * 1e-9 * max(1.0, abs(v)) if np.isfinite(v) else v
    lo, hi = shrink(lo, -1), shrink(hi, 1)
    return max(lo, lower), min(hi, upper)


def _golden(f, a: float, b: float, tol: float) -> float:
    c, d = b - _INVPHI * (b - a), a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def optimal_weight_info(draws, weights, rf: float, scenario: AllocationScenario) -> WeightChoice:
    draws = np.asarray(draws, float)
    omega = np.asarray(weights, float)
    if draws.size == 0 or not omega.sum() > 0:
        raise ValueError("empty sample or zero total weight")
    omega = omega / omega.sum()
    keep = omega > 0
    draws, omega = draws[keep], omega[keep]
    m, truncated = _excess_gross(draws, scenario.unbounded)
    if np.all(m == 0):
        return WeightChoice(0.0, False, truncated)
    lower = max(scenario.lower, -WEIGHT_CAP)
    upper = min(scenario.upper, WEIGHT_CAP)
    a, b = feasible_interval(m, lower, upper)
    if not a < b:
        raise ValueError("no feasible weight keeps wealth positive")
    g = scenario.gamma
    f = lambda w: float(expected_utility_gain(w, m, omega, g))
    grid = np.linspace(a, b, GRID_POINTS)
    vals = expected_utility_gain(grid, m, omega, g)
    k = int(np.argmax(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, GRID_POINTS - 1)]
    w = _golden(f, lo, hi, GOLDEN_TOL)
    cands = [(f(w), w), (vals[k], grid[k]), (f(a), a), (f(b), b)]
    best_val, w = max(cands, key=lambda c: c[0])
    if f(0.0) >= best_val and lower <= 0.0 <= upper:
        w = 0.0
    capped = scenario.unbounded and (abs(w) >= WEIGHT_CAP * (1 - 1e-9))
    if capped:
        logger.info("weight cap of %.0f binds", WEIGHT_CAP)
    return WeightChoice(float(w), bool(capped), truncated)


def optimal_weight(draws, weights, rf: float, scenario: AllocationScenario) -> float:
    """Expected-utility maximising weight over the predictive sample."""
    return optimal_weight_info(draws, weights, rf, scenario).w


def terminal_wealth(w, rf, rx, truncate: bool = False, floor: bool = True):
    """(1 - w) e^{rf} + w e^{rf + rx}, floored at 1e-4 e^{rf} when ``floor``."""
    rx = np.asarray(rx, float)
    if truncate:
        rx = np.clip(rx, math.log(RETURN_FLOOR), math.log(RETURN_CEIL))
    wealth = np.exp(rf) * (1.0 + np.asarray(w, float) * np.expm1(rx))
    if floor:
        wealth = np.maximum(wealth, WEALTH_FLOOR * np.exp(rf))
    return wealth


def realized_utility(w, rf, rx, gamma: float, truncate: bool = False, floor: bool = True):
    wealth = terminal_wealth(w, rf, rx, truncate, floor)
    if np.any(wealth <= 0):
        raise ValueError("non-positive wealth")
    return wealth ** (1.0 - gamma) / (1.0 - gamma)


def cer(model_utils, bench_utils, gamma: float) -> float:
    """(sum U_model / sum U_bench)^{1/(1-gamma)} - 1 over aligned ledgers."""
    su, sb = float(np.sum(model_utils)), float(np.sum(bench_utils))
    if np.shape(model_utils) != np.shape(bench_utils):
        raise ValueError("ledgers are not aligned")
    if not (su < 0 and sb < 0):
        raise ValueError("utility sums must both be negative for gamma > 1")
    return (su / sb) ** (1.0 / (1.0 - gamma)) - 1.0


def annualize(c: float, h: int) -> float:
    return c * 12.0 / h


@dataclass
class UtilityLedger:
    origins: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    utilities: list = field(default_factory=list)
    wealth: list = field(default_factory=list)
    caps: int = 0
    truncations: int = 0


def run_ledger(samples, origins, rf, rx, scenario: AllocationScenario) -> UtilityLedger:
    """Choose a weight at each origin and book the realised utility."""
    led = UtilityLedger()
    for t, (draws, omega), r, x in zip(origins, samples, rf, rx):
        ch = optimal_weight_info(draws, omega, r, scenario)
        wealth = float(terminal_wealth(ch.w, r, x, scenario.unbounded))
        led.origins.append(int(t))
        led.weights.append(ch.w)
        led.wealth.append(wealth)
        led.utilities.append(wealth ** (1 - scenario.gamma) / (1 - scenario.gamma))
        led.caps += int(ch.weight_capped)
        led.truncations += int(ch.returns_truncated)
    return led


def eh_samples(rx_history: np.ndarray, origins, h: int, mode: str = "empirical"):
    """Predictive samples for the historical-mean investor at each origin.

    ``empirical`` uses the equally weighted completed returns; ``point`` uses
    their mean as a degenerate distribution.
    """
    out = []
    for t in origins:
        hist = np.asarray(rx_history[: t - h + 1], float)
        if mode == "empirical":
            out.append((hist, np.ones(hist.size)))
        elif mode == "point":
            out.append((np.array([hist.mean()]), np.array([1.0])))
        else:
            raise ValueError(f"unknown benchmark mode {mode!r}")
    return out


@dataclass
class BacktestCell:
    n: int
    h: int
    scenario: str
    cer: float
    cer_annualized: float
    dm_stat: float
    dm_p: float
    model: UtilityLedger
    bench: UtilityLedger

    def summary(self) -> dict:
        return {"n": self.n, "h": self.h, "scenario": self.scenario, "cer": self.cer,
                "cer_annualized": self.cer_annualized, "dm_stat": self.dm_stat, "dm_p": self.dm_p,
                "mean_weight_model": float(np.mean(self.model.weights)),
                "mean_weight_bench": float(np.mean(self.bench.weights)),
                "caps": self.model.caps + self.bench.caps,
                "truncations": self.model.truncations + self.bench.truncations}


def backtest_cell(model_samples, bench_samples, origins, rf, rx, n: int, h: int,
                  scenario: AllocationScenario) -> BacktestCell:
    """CER of a model investor against a benchmark investor on one (n, h, scenario)."""
    if len(model_samples) != len(origins) or len(bench_samples) != len(origins):
        raise ValueError("samples missing for some origins")
    lm = run_ledger(model_samples, origins, rf, rx, scenario)
    lb = run_ledger(bench_samples, origins, rf, rx, scenario)
    c = cer(lm.utilities, lb.utilities, scenario.gamma)
    diff = np.asarray(lm.utilities) - np.asarray(lb.utilities)
    try:
        stat, p = dm_test(diff, h)
    except (ValueError, ZeroDivisionError):
        stat, p = float("nan"), float("nan")
    return BacktestCell(n, h, scenario.name, c, annualize(c, h), stat, p, lm, lb)


def backtest(model_series, rf_by_origin: dict, rx_by_key: dict, scenarios=SCENARIOS,
             bench_series=None, eh_mode: str = "empirical") -> list[BacktestCell]:
    """Backtest every (maturity, horizon) series under every scenario.

    ``model_series`` maps (n, h) to forecast series carrying predictive draws.
    The benchmark is the historical-mean investor unless ``bench_series``
    (same keys) supplies another model's predictive draws.
    """
    cells = []
    for key, ser in model_series.items():
        n, h = key
        origins = list(ser.origins)
        if not ser.draws:
            raise ValueError(f"forecast series {key} carries no predictive draws")
        ms = list(zip(ser.draws, ser.weights))
        if bench_series is None:
            bs = eh_samples(rx_by_key[key], origins, h, eh_mode)
        else:
            other = bench_series[key]
            if list(other.origins) != origins:
                raise ValueError("benchmark origins differ")
            bs = list(zip(other.draws, other.weights))
        rf = [rf_by_origin[h][t] for t in origins]
        rx = list(ser.realized)
        for sc in scenarios:
            cells.append(backtest_cell(ms, bs, origins, rf, rx, n, h, sc))
    return cells


def cells_to_json(cells) -> str:
    return json.dumps([c.summary() for c in cells], indent=2, sort_keys=True)
