"""Run configuration read from a TOML file."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import month_index
from .portfolio import SCENARIOS, AllocationScenario
from .smc import SMCConfig


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""


@dataclass
class ModelSection:
    name: str = "LF010"
    R: int = 3


@dataclass
class DataSection:
    panel: str = "panel.csv"
    units: str = "auto"
    weights: str = "pca"  # "pca" or a JSON file holding the weight matrix
    start: str | None = None
    train_end: str = "2007-12"
    test_end: str = "2018-12"
    # shorter evaluation window used for in-sample figures and tables
    insample_end: str = "2017-12"


@dataclass
class SimulateSection:
    T: int = 240
    start: str = "1990-01"
    c: float = 0.6
    phi_z: float = 0.9
    lambda12: float = -0.02


@dataclass
class TuneSection:
    restarts: int = 5
    mle_restarts: int = 3
    sigma_z: list | None = None  # skip tuning when given


@dataclass
class SMCSection:
    n_particles: int = 2000
    ess_fraction: float = 0.7
    n_sweeps: int = 5
    resampling: str = "multinomial"
    warm_sweeps: int = 200
    checkpoint_every: int = 1
    conditional_proposals: bool = True


@dataclass
class ForecastSection:
    maturities: list = field(default_factory=lambda: [24, 36, 48, 60, 84, 120])
    horizons: list = field(default_factory=lambda: [1, 3, 6, 12])
    interpolate: bool = False
    eh_mode: str = "empirical"


@dataclass
class BacktestSection:
    scenarios: list = field(default_factory=lambda: [s.name for s in SCENARIOS])
    gamma: float = 5.0


@dataclass
class AnalysisSection:
    nw_lags: int = 12
    macro: str | None = None
    groups: dict = field(default_factory=dict)
    normalize_sign: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    tune: TuneSection = field(default_factory=TuneSection)
    smc: SMCSection = field(default_factory=SMCSection)
    forecast: ForecastSection = field(default_factory=ForecastSection)
    backtest: BacktestSection = field(default_factory=BacktestSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    # output directory of a second run (typically M1) used as an extra benchmark
    compare_dir: str | None = None
    compare_name: str = "M1"
    base_dir: str = "."

    def smc_config(self) -> SMCConfig:
        s = self.smc
        return SMCConfig(n_particles=s.n_particles, ess_fraction=s.ess_fraction, n_sweeps=s.n_sweeps,
                         resampling=s.resampling, seed=self.seed)

    def scenarios(self) -> list[AllocationScenario]:
        known = {s.name: s for s in SCENARIOS}
        return [replace(known[n], gamma=self.backtest.gamma) for n in self.backtest.scenarios]

    def path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out(self) -> Path:
        return self.path(self.output_dir)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def validate(self) -> "RunConfig":
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}")

        need(self.model.R >= 1, "model.R", "must be positive")
        need(self.model.name in ("M0", "M1") or (self.model.name.startswith("LF")
                                                  and len(self.model.name) == 2 + self.model.R
                                                  and set(self.model.name[2:]) <= {"0", "1"}),
             "model.name", f"unknown model {self.model.name!r}")
        need(self.data.units in ("auto", "decimal", "percent"), "data.units", "must be auto, decimal or percent")
        for key in ("train_end", "test_end", "insample_end"):
            try:
                month_index(getattr(self.data, key))
            except ValueError as exc:
                raise ConfigError(f"data.{key}: {exc}") from None
        need(month_index(self.data.train_end) < month_index(self.data.test_end), "data.train_end",
             "must precede data.test_end")
        need(self.simulate.T >= 2, "simulate.T", "must be at least 2")
        need(self.smc.n_particles >= 2, "smc.n_particles", "must be at least 2")
        need(0 < self.smc.ess_fraction <= 1, "smc.ess_fraction", "must lie in (0, 1]")
        need(self.smc.n_sweeps >= 1, "smc.n_sweeps", "must be positive")
        need(self.smc.resampling in ("multinomial", "systematic"), "smc.resampling",
             "must be multinomial or systematic")
        need(self.smc.checkpoint_every >= 1, "smc.checkpoint_every", "must be positive")
        for i, h in enumerate(self.forecast.horizons):
            need(isinstance(h, int) and h >= 1, f"forecast.horizons[{i}]", "must be a positive integer")
        for i, n in enumerate(self.forecast.maturities):
            need(isinstance(n, int) and n >= 1, f"forecast.maturities[{i}]", "must be a positive integer")
        need(self.forecast.eh_mode in ("empirical", "point"), "forecast.eh_mode", "must be empirical or point")
        known = {s.name for s in SCENARIOS}
        for i, n in enumerate(self.backtest.scenarios):
            need(n in known, f"backtest.scenarios[{i}]", f"unknown scenario {n!r}; choose from {sorted(known)}")
        need(self.backtest.gamma > 1, "backtest.gamma", "must exceed 1")
        need(self.analysis.nw_lags >= 0, "analysis.nw_lags", "must be non-negative")
        return self


_SECTIONS = {f.name: f for f in fields(RunConfig)}


def _build(cls, raw: dict, prefix: str):
    names = {f.name for f in fields(cls)}
    for k in raw:
        if k not in names:
            raise ConfigError(f"{prefix}{k}: unknown key")
    return cls(**raw)


def config_from_dict(raw: dict, base_dir=".") -> RunConfig:
    kwargs = {"base_dir": str(base_dir)}
    for key, val in raw.items():
        if key not in _SECTIONS or key == "base_dir":
            raise ConfigError(f"{key}: unknown key")
        default = getattr(RunConfig(), key)
        if hasattr(default, "__dataclass_fields__"):
            if not isinstance(val, dict):
                raise ConfigError(f"{key}: expected a table")
            kwargs[key] = _build(type(default), val, f"{key}.")
        else:
            kwargs[key] = val
    try:
        return RunConfig(**kwargs).validate()
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, path.parent)
