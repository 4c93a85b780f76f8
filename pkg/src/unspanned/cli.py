"""Command-line pipeline: simulate, tune, estimate, forecast, backtest, analyze, report.

Every command reads a TOML run configuration and writes into its output
directory.  Outputs carry no timestamps, so identical configurations and
seeds give byte-identical files.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .analysis import RankDeficient, delta_r2_table, hidden_component, load_macro_csv, macro_link_table, spanning_table
from .config import ConfigError, RunConfig, load_config
from .data import (ModelData, PanelError, YieldPanel, explained_variance, load_yield_panel, month_index,
                   month_label, pca_weights, save_yield_panel)
from .forecast import Forecaster, ForecastSeries, MaturityError, excess_return_series, yield_column
from .inference import AtsmModel, AtsmParticles, MLEFailure, Proposals, from_unconstrained, theta_dynamics, warm_start
from .portfolio import backtest_cell, eh_samples
from .pricing import ModelSpec, PCWeights, PricingError
from .simulate import ExplosiveDynamics, default_truth, simulate_panel
from .smc import (PURPOSE_INIT, DegeneracyError, checkpoint_name, init_cloud, latest_checkpoint, load_checkpoint,
                  run_ibis, save_checkpoint, stage_rng, weighted_summary)
from .state_space import LatentSpec, NumericalFailure, TuningRecord, filtered_latent, tune_sigma_z

logger = logging.getLogger("unspanned")

WORKERS_ENV = "UNSPANNED_WORKERS"
MANIFEST_SCHEMA = "unspanned.manifest/1"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# ---------------------------------------------------------------------------
# shared plumbing


def _dump(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def _read_json(path: Path, what: str):
    if not path.exists():
        raise ConfigError(f"{path}: {what} not found; run the earlier pipeline step first")
    return json.loads(path.read_text())


def _version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        v = version("artifact")
    except PackageNotFoundError:
        v = "0+unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            v += "+g" + rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return v


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV}: expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV}: must be positive")
    return n


def _relative(path, root: Path) -> str:
    """Path relative to the output directory when inside it, so manifests do not depend on location."""
    if path is None:
        return str(path)
    try:
        return os.path.relpath(Path(path).resolve(), Path(root).resolve())
    except ValueError:
        return str(path)


def update_manifest(cfg: RunConfig, command: str, artifacts: dict) -> Path:
    path = cfg.out / "manifest.json"
    man = json.loads(path.read_text()) if path.exists() else {"schema": MANIFEST_SCHEMA, "commands": {}}
    man["config"] = cfg.to_dict()
    man["config_hash"] = cfg.digest()
    man["seed"] = cfg.seed
    man["version"] = _version()
    man["commands"][command] = {"config_hash": cfg.digest(),
                                "artifacts": {k: _relative(v, cfg.out) for k, v in sorted(artifacts.items())}}
    return _dump(man, path)


def estimation_digest(cfg: RunConfig) -> str:
    """Hash of the settings that determine the particle cloud."""
    import hashlib

    d = cfg.to_dict()
    keep = {k: d[k] for k in ("seed", "model", "data", "tune", "smc")}
    return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()


class Prepared:
    """Panel, weights and time indices shared by all estimation-side commands."""

    def __init__(self, cfg: RunConfig):
        panel = load_yield_panel(cfg.path(cfg.data.panel), cfg.data.units)
        start = 0 if cfg.data.start is None else _first_at_or_after(panel, cfg.data.start)
        stop = panel.index_of(cfg.data.test_end) + 1
        self.panel = panel.window(start, stop)
        self.t_train = self.panel.index_of(cfg.data.train_end)
        self.t_insample = min(self.panel.index_of(cfg.data.insample_end), self.panel.T - 1)
        self.spec = ModelSpec.from_name(cfg.model.name, self.panel.maturities, cfg.model.R)
        if cfg.data.weights == "pca":
            self.weights = pca_weights(self.panel.monthly[: self.t_train + 1], cfg.model.R, self.panel.maturities)
        else:
            raw = _read_json(cfg.path(cfg.data.weights), "weight file")
            self.weights = PCWeights.from_matrix(np.array(raw["w"]), raw["maturities"])
        self.data = ModelData.from_panel(self.panel, self.weights)
        if self.t_train >= self.data.T:
            raise ConfigError("data.train_end: leaves no observations for the test window")

    def label(self, t: int) -> str:
        return self.panel.dates[t]


def _first_at_or_after(panel: YieldPanel, date: str) -> int:
    target = month_index(date)
    for i, d in enumerate(panel.dates):
        if month_index(d) >= target:
            return i
    raise PanelError(f"data.start: no observation at or after {date}")


def _sigma_z(cfg: RunConfig, prep: Prepared):
    if prep.spec.n_latent == 0:
        return None
    if cfg.tune.sigma_z is not None:
        sz = np.asarray(cfg.tune.sigma_z, float)
        if sz.shape != (prep.spec.n_latent,):
            raise ConfigError(f"tune.sigma_z: expected {prep.spec.n_latent} values")
        return sz
    rec = TuningRecord.from_json((cfg.out / "tuning.json").read_text()) if (cfg.out / "tuning.json").exists() \
        else None
    if rec is None:
        raise ConfigError(f"{cfg.out / 'tuning.json'}: not found; run 'tune' or set tune.sigma_z")
    return np.asarray(rec.sigma_z, float)


def make_model(cfg: RunConfig, prep: Prepared) -> AtsmModel:
    return AtsmModel(prep.spec, prep.data, _sigma_z(cfg, prep),
                     conditional_proposals=cfg.smc.conditional_proposals)


def _pairs(cfg: RunConfig, args) -> list[tuple[int, int]]:
    ns = args.maturity or cfg.forecast.maturities
    hs = args.horizon or cfg.forecast.horizons
    return [(int(n), int(h)) for h in hs for n in ns if n > h]


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, args) -> dict:
    s = cfg.simulate
    truth = default_truth(cfg.model.name, c=s.c, phi_z=s.phi_z, lambda12=s.lambda12)
    sim = simulate_panel(truth, s.T, cfg.seed)
    m0 = month_index(s.start)
    panel = YieldPanel([month_label(m0 + t) for t in range(s.T + 1)], truth.spec.maturities, sim.y * 12.0,
                       provenance=f"simulated seed={cfg.seed}")
    panel_path = cfg.path(cfg.data.panel)
    panel_path.parent.mkdir(parents=True, exist_ok=True)
    save_yield_panel(panel, panel_path)
    th = truth.theta
    truth_json = {"model": truth.spec.name, "k_inf_q": float(th.k_inf_q), "g_q": th.g_q.tolist(),
                  "sigma_p": th.sigma_p.tolist(), "sigma_e2": float(th.sigma_e2), "phi_z": th.phi_z.tolist(),
                  "lambda12": np.asarray(th.lambda12).tolist(), "sigma_z": truth.sigma_z.tolist(),
                  "z": sim.z.tolist(), "p": sim.p.tolist()}
    weights_json = {"w": truth.weights.w.tolist(), "maturities": list(truth.weights.maturities)}
    return {"panel": panel_path, "truth": _dump(truth_json, cfg.out / "truth.json"),
            "truth_weights": _dump(weights_json, cfg.out / "truth_weights.json")}


def cmd_tune(cfg: RunConfig, args) -> dict:
    prep = Prepared(cfg)
    out = {"weights": _dump({"w": prep.weights.w.tolist(), "maturities": list(prep.weights.maturities),
                             "explained": explained_variance(prep.panel.monthly[: prep.t_train + 1],
                                                             prep.weights).tolist()},
                            cfg.out / "weights.json")}
    if prep.spec.n_latent == 0:
        logger.info("model %s has no latent factor; nothing to tune", prep.spec.name)
        return out
    rng = stage_rng(cfg.seed, prep.t_train, 0, PURPOSE_INIT + 10)
    rec = tune_sigma_z(prep.data.head(prep.t_train), prep.spec, rng, cfg.tune.restarts, cfg.tune.mle_restarts)
    path = cfg.out / "tuning.json"
    path.write_text(rec.to_json() + "\n")
    out["tuning"] = path
    return out


def _checkpoint_dir(cfg: RunConfig) -> Path:
    return cfg.out / "checkpoints"


def cmd_estimate(cfg: RunConfig, args) -> dict:
    prep = Prepared(cfg)
    model = make_model(cfg, prep)
    smc = cfg.smc_config()
    ck = _checkpoint_dir(cfg)
    meta_path = ck / "meta.json"
    digest = estimation_digest(cfg)
    latest = latest_checkpoint(ck) if ck.exists() else None
    if latest is not None and args.resume:
        meta = _read_json(meta_path, "checkpoint metadata")
        if meta.get("estimation_hash") != digest:
            raise ConfigError(f"{ck}: checkpoints were written under a different configuration; "
                              "use --no-resume or a new output directory")
        cloud, header = load_checkpoint(latest, AtsmParticles, Proposals)
        if header.get("config") != asdict(smc):
            raise ConfigError(f"{latest}: sampler settings differ from the configuration")
        logger.info("resuming from %s (t=%d)", latest.name, cloud.t)
    else:
        if ck.exists():
            for f in ck.glob("cloud_t*.npz"):
                f.unlink()
        _dump({"estimation_hash": digest, "t_train": prep.t_train, "T": prep.data.T}, meta_path)
        rng = stage_rng(cfg.seed, prep.t_train, 0, PURPOSE_INIT)
        particles, props = warm_start(model, prep.t_train, smc.n_particles, rng, n_sweeps=cfg.smc.warm_sweeps)
        cloud = init_cloud(particles, cfg.seed, prep.t_train, props)
        save_checkpoint(cloud, ck / checkpoint_name(prep.t_train), smc)
    cloud = run_ibis(cloud, model, prep.data.T, smc, ck, checkpoint_every=cfg.smc.checkpoint_every)
    summary = weighted_summary(cloud, model)
    summary["_t"] = cloud.t
    summary["_date"] = prep.label(cloud.t)
    summary["_tempering_events"] = len(cloud.traces)
    summary["_quarantined"] = cloud.n_quarantined
    return {"summary": _dump(summary, cfg.out / "estimate.json"), "checkpoints": ck,
            "latest_checkpoint": latest_checkpoint(ck)}


def _origin_checkpoints(cfg: RunConfig) -> list[Path]:
    ck = _checkpoint_dir(cfg)
    files = sorted(ck.glob("cloud_t*.npz")) if ck.exists() else []
    if not files:
        raise ConfigError(f"{ck}: no checkpoints; run 'estimate' first")
    return files


def cmd_forecast(cfg: RunConfig, args) -> dict:
    prep = Prepared(cfg)
    model = make_model(cfg, prep)
    pairs = _pairs(cfg, args)
    fc = Forecaster(model, pairs, cfg.seed, prep.data.T, cfg.forecast.interpolate)
    for path in _origin_checkpoints(cfg):
        cloud, _ = load_checkpoint(path, AtsmParticles, Proposals)
        fc(cloud)
    fdir = cfg.out / "forecasts"
    fdir.mkdir(parents=True, exist_ok=True)
    evals = []
    for (n, h), ser in fc.series.items():
        stem = f"rx_n{n:03d}_h{h:02d}"
        ser.write_csv(fdir / f"{stem}.csv")
        np.savez(fdir / f"{stem}.npz", origins=np.array(ser.origins), realized=np.array(ser.realized),
                 model_point=np.array(ser.model_point), eh_point=np.array(ser.eh_point),
                 draws=np.array(ser.draws), weights=np.array(ser.weights))
        other = _comparison_series(cfg, n, h, ser.origins)
        try:
            ev = ser.evaluate(other)
        except (ValueError, ZeroDivisionError) as exc:
            ev = {"n": n, "h": h, "count": len(ser.origins), "error": str(exc)}
        evals.append(ev)
    return {"forecasts": fdir, "evaluation": _dump(evals, cfg.out / "forecast.json")}


def _load_series(path: Path, n: int, h: int) -> ForecastSeries:
    with np.load(path) as f:
        return ForecastSeries(n, h, f["origins"].tolist(), f["realized"].tolist(), f["model_point"].tolist(),
                              f["eh_point"].tolist(), list(f["draws"]), list(f["weights"]))


def _comparison_series(cfg: RunConfig, n: int, h: int, origins) -> ForecastSeries | None:
    """Forecasts of the comparison run for (n, h), which must share the origins."""
    if cfg.compare_dir is None:
        return None
    path = cfg.path(cfg.compare_dir) / "forecasts" / f"rx_n{n:03d}_h{h:02d}.npz"
    if not path.exists():
        raise ConfigError(f"compare_dir: {path} not found; run 'forecast' for the comparison model first")
    other = _load_series(path, n, h)
    if list(other.origins) != list(origins):
        raise ConfigError(f"compare_dir: forecast origins for n={n}, h={h} differ from this run")
    return other


def _cell(task):
    ms, bs, origins, rf, rx, n, h, sc, bench = task
    return {**backtest_cell(ms, bs, origins, rf, rx, n, h, sc).summary(), "benchmark": bench}


def cmd_backtest(cfg: RunConfig, args) -> dict:
    prep = Prepared(cfg)
    y = prep.data.y
    mats = prep.data.maturities
    scenarios = [s for s in cfg.scenarios() if not args.scenario or s.name in args.scenario]
    if args.scenario and not scenarios:
        raise ConfigError(f"--scenario: none of {args.scenario} is configured")
    tasks = []
    for n, h in _pairs(cfg, args):
        path = cfg.out / "forecasts" / f"rx_n{n:03d}_h{h:02d}.npz"
        if not path.exists():
            raise ConfigError(f"{path}: not found; run 'forecast' first")
        ser = _load_series(path, n, h)
        if not ser.origins:
            continue
        try:
            yh, _ = yield_column(y, mats, h, cfg.forecast.interpolate)
            rx_all, _ = excess_return_series(y, mats, n, h, cfg.forecast.interpolate)
        except MaturityError as exc:
            raise ConfigError(f"forecast.maturities: {exc}") from None
        origins = ser.origins
        rf = [h * float(yh[t]) for t in origins]
        ms = list(zip(ser.draws, ser.weights))
        bs = eh_samples(rx_all, origins, h, cfg.forecast.eh_mode)
        other = _comparison_series(cfg, n, h, origins)
        for sc in scenarios:
            tasks.append((ms, bs, origins, rf, ser.realized, n, h, sc, "EH"))
            if other is not None:
                tasks.append((ms, list(zip(other.draws, other.weights)), origins, rf, ser.realized, n, h, sc,
                              cfg.compare_name))
    workers = _workers()
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(workers) as ex:
            cells = list(ex.map(_cell, tasks))
    else:
        cells = [_cell(t) for t in tasks]
    return {"backtest": _dump(cells, cfg.out / "backtest.json")}


def posterior_latent_path(model: AtsmModel, particles: AtsmParticles, logw: np.ndarray, t_end: int) -> np.ndarray:
    """Posterior-weighted filtered latent path E[Z_t | P_{0:t}], t = 1..t_end."""
    theta = from_unconstrained(particles.x, model.layout)
    dyn, _, valid = theta_dynamics(theta, model.data.weights)
    lat = LatentSpec(np.where(valid[:, None], theta.phi_z, 0.0), model.sigma_z, model.spec.latent_mask)
    with np.errstate(all="ignore"):
        paths = filtered_latent(model.data.p[: t_end + 1], dyn, lat)
    w = np.exp(logw - np.max(logw)) * valid
    ok = np.all(np.isfinite(paths), axis=(1, 2))
    w = np.where(ok, w, 0.0)
    w = w / w.sum()
    return np.einsum("i,itd->td", w, np.where(ok[:, None, None], paths, 0.0))


def cmd_analyze(cfg: RunConfig, args) -> dict:
    prep = Prepared(cfg)
    model = make_model(cfg, prep)
    if prep.spec.n_latent == 0:
        raise ConfigError(f"model.name: {prep.spec.name} has no latent factor to analyse")
    files = _origin_checkpoints(cfg)
    t_a = prep.t_insample
    usable = [f for f in files if int(f.stem.split("_t")[1]) <= t_a]
    path = usable[-1] if usable else files[0]
    cloud, _ = load_checkpoint(path, AtsmParticles, Proposals)
    t_a = min(t_a, cloud.t)
    z = posterior_latent_path(model, cloud.particles, cloud.logw, t_a)
    p = prep.data.p[1: t_a + 1]
    y = prep.data.y[1: t_a + 1]
    names = [f"Z[{k}]" for k in prep.spec.latent_index]
    hc = hidden_component(z, p, cfg.analysis.nw_lags)
    out = {"cloud_t": cloud.t, "window": [prep.label(1), prep.label(t_a)],
           "spanning": spanning_table(z, p, names),
           "delta_r2": {}, "macro": None}
    for j, nm in enumerate(names):
        out["delta_r2"][nm] = delta_r2_table(y, prep.data.maturities, p, z[:, j],
                                             args.horizon or cfg.forecast.horizons,
                                             args.maturity or cfg.forecast.maturities, cfg.forecast.interpolate)
    if cfg.analysis.macro:
        dates = prep.panel.dates[1: t_a + 1]
        _, mnames, M = load_macro_csv(cfg.path(cfg.analysis.macro), dates, cfg.analysis.normalize_sign)
        ok = np.all(np.isfinite(M), axis=1)
        targets = {}
        for j, nm in enumerate(names):
            targets[nm] = z[ok, j]
            targets[f"spanned {nm}"] = hc.spanned[ok, j]
            targets[f"hidden {nm}"] = hc.hidden[ok, j]
        try:
            out["macro"] = {"rows": macro_link_table(targets, M[ok], mnames, cfg.analysis.groups,
                                                     cfg.analysis.nw_lags),
                            "observations": int(ok.sum()), "intercept_included": True}
        except RankDeficient as exc:
            raise ConfigError(f"analysis.groups: {exc}") from None
    np.savez(cfg.out / "latent_path.npz", z=z, spanned=hc.spanned, hidden=hc.hidden, p=p)
    return {"analysis": _dump(out, cfg.out / "analysis.json"), "latent_path": cfg.out / "latent_path.npz"}


def cmd_report(cfg: RunConfig, args) -> dict:
    evals = _read_json(cfg.out / "forecast.json", "forecast evaluation")
    cells = _read_json(cfg.out / "backtest.json", "backtest results")
    mats = set(args.maturity or cfg.forecast.maturities)
    hs = set(args.horizon or cfg.forecast.horizons)
    keep = lambda r: r["n"] in mats and r["h"] in hs
    report = {}
    for suffix, bench in (("eh", "EH"), ("other", cfg.compare_name)):
        r2 = {}
        for e in filter(keep, evals):
            if f"r2_os_vs_{suffix}" in e:
                r2.setdefault(f"h={e['h']}", {})[f"n={e['n']}"] = {
                    "r2_os": e[f"r2_os_vs_{suffix}"], "cw_p": e[f"cw_p_vs_{suffix}"], "count": e["count"]}
        cer = {}
        for c in filter(keep, cells):
            if c["benchmark"] != bench or (args.scenario and c["scenario"] not in args.scenario):
                continue
            cer.setdefault(c["scenario"], {}).setdefault(f"h={c['h']}", {})[f"n={c['n']}"] = {
                "cer_annualized": c["cer_annualized"], "dm_p": c["dm_p"],
                "mean_weight": c["mean_weight_model"]}
        if r2 or cer:
            report[f"r2_os_vs_{bench}"] = r2
            report[f"cer_vs_{bench}"] = cer
    return {"report": _dump(report, cfg.out / "report.json")}


COMMANDS = {"simulate": cmd_simulate, "tune": cmd_tune, "estimate": cmd_estimate, "forecast": cmd_forecast,
            "backtest": cmd_backtest, "analyze": cmd_analyze, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unspanned", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", required=True, help="TOML run configuration")
    ap.add_argument("--seed", type=int, help="override the configured seed")
    ap.add_argument("--particles", type=int, help="override smc.n_particles")
    ap.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True,
                    help="continue from the latest checkpoint when present (default on)")
    ap.add_argument("--output-dir", help="override output_dir")
    ap.add_argument("--scenario", action="append", help="restrict to an allocation scenario (repeatable)")
    ap.add_argument("--maturity", action="append", type=int, help="restrict to a maturity in months (repeatable)")
    ap.add_argument("--horizon", action="append", type=int, help="restrict to a horizon in months (repeatable)")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.particles is not None:
        cfg = replace(cfg, smc=replace(cfg.smc, n_particles=args.particles))
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=str(Path(args.output_dir).resolve()))
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.command](cfg, args)
        update_manifest(cfg, args.command, artifacts)
    except (ConfigError, PanelError, MaturityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, DegeneracyError, MLEFailure, PricingError, ExplosiveDynamics,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
