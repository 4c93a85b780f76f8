"""Iterated batch importance sampling with hybrid adaptive tempering.

A cloud of parameter particles is carried forward one observation at a
time.  Each particle is reweighted by its one-step predictive density u_t.
When the effective sample size falls below ``ess_fraction * N`` the new
observation is introduced gradually: an exponent phi is raised from 0 to 1 in
stages, each chosen by bisection so that the ESS of the partially updated
weights stays at the trigger, followed by resampling and a few MCMC sweeps
targeting the tempered posterior

    pi_phi(theta) ~ prior(theta) f(Y_{1:t-1} | theta) f(Y_t | Y_{t-1}, theta)^phi.

The sampler is generic: it talks to a model object exposing

``increment(particles, t) -> (log_u, pending)``
    one-step log predictive densities from particle states at t-1;
``commit(particles, pending, t) -> particles``
    advance particle states to t;
``move(particles, t, phi, proposals, rng, n_sweeps) -> (particles, log_u, pending, info)``
    MCMC jitter at the tempered target, returning refreshed increments;
``fit_proposals(particles, logw) -> proposals``;
``summary(particles) -> dict[str, ndarray]``.

Particles must support ``len``, ``take(indices)``, ``arrays()`` and
``from_arrays(dict, t)``.

Random numbers for each (time, stage, purpose) come from their own
``SeedSequence``, so results do not depend on how many steps were run in a
single process: a run resumed from a checkpoint replays exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "unspanned.cloud/1"

PURPOSE_RESAMPLE = 1
PURPOSE_MOVE = 2
PURPOSE_INIT = 3
PURPOSE_PREDICT = 4


class DegeneracyError(ArithmeticError):
    """Too many particles produced non-finite likelihood increments."""


@dataclass
class SMCConfig:
    n_particles: int = 2000
    ess_fraction: float = 0.7
    n_sweeps: int = 5
    resampling: str = "multinomial"
    bisect_tol: float = 1e-3  # fraction of N
    bisect_max_iter: int = 60
    min_step: float = 1e-3
    quarantine_limit: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if not 0 < self.ess_fraction <= 1:
            raise ValueError("ess_fraction must lie in (0, 1]")
        if self.resampling not in ("multinomial", "systematic"):
            raise ValueError("resampling must be 'multinomial' or 'systematic'")


@dataclass
class TemperTrace:
    t: int
    phis: list = field(default_factory=list)
    ess: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)


@dataclass
class ParticleCloud:
    particles: object
    logw: np.ndarray
    t: int
    seed: int
    log_m: list = field(default_factory=list)
    log_m_tempered: list = field(default_factory=list)
    times: list = field(default_factory=list)
    traces: list = field(default_factory=list)
    n_quarantined: int = 0
    proposals: object = None

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(self.logw - np.max(self.logw))
        return w / w.sum()

    @property
    def log_evidence(self) -> float:
        return float(np.sum(self.log_m))

    def ess(self) -> float:
        return ess_log(self.logw)


def ess(weights) -> float:
    """(sum w)^2 / sum w^2 for non-negative weights."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    s = w.sum()
    if not s > 0:
        raise ValueError("all weights are zero")
    w = w / w.max()
    return float(w.sum() ** 2 / np.sum(w * w))


def ess_log(logw) -> float:
    logw = np.asarray(logw, dtype=float)
    m = np.max(logw)
    if not np.isfinite(m):
        raise ValueError("all weights are zero")
    w = np.exp(logw - m)
    return float(w.sum() ** 2 / np.sum(w * w))


def stage_rng(seed: int, t: int, stage: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(t), int(stage), int(purpose)]))


def resample_multinomial(logw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices with multinomial offspring counts."""
    w = np.exp(logw - np.max(logw))
    w /= w.sum()
    counts = rng.multinomial(len(w), w)
    return np.repeat(np.arange(len(w)), counts)


def resample_systematic(logw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    w = np.exp(logw - np.max(logw))
    c = np.cumsum(w / w.sum())
    c[-1] = 1.0
    n = len(w)
    u = (rng.random() + np.arange(n)) / n
    return np.searchsorted(c, u, side="right")


def _scaled(logu: np.ndarray, step: float) -> np.ndarray:
    """step * logu with 0 * (-inf) taken as -inf for positive steps."""
    if step <= 0:
        return np.zeros_like(logu)
    return step * logu


def _quarantine(logu: np.ndarray, logw: np.ndarray, limit: float, t: int) -> tuple[np.ndarray, int]:
    logu = np.where(np.isnan(logu) | (logu == np.inf), -np.inf, logu)
    live = np.isfinite(logw)
    bad = int(np.sum(live & ~np.isfinite(logu)))
    if bad:
        logger.warning("t=%d: %d particle(s) quarantined with non-finite increments", t, bad)
    if bad > limit * max(int(live.sum()), 1):
        raise DegeneracyError(f"t={t}: {bad} of {int(live.sum())} particles have non-finite increments")
    return logu, bad


def bisect_exponent(logw: np.ndarray, logu: np.ndarray, phi_prev: float, target: float,
                    tol: float, max_iter: int = 60) -> tuple[float, int]:
    """Largest phi in (phi_prev, 1] with ESS(logw + (phi - phi_prev) logu) >= target.

    Returns (phi, iterations).  ESS is evaluated on the bracket ends and the
    lower end is returned, so the returned exponent always meets the trigger
    when bracketing succeeds.  If even the smallest step violates the trigger
    the caller must enforce a minimum step.
    """
    f = lambda phi: ess_log(logw + _scaled(logu, phi - phi_prev))
    lo, hi = phi_prev, 1.0
    if f(hi) >= target:
        return 1.0, 0
    it = 0
    while it < max_iter:
        it += 1
        mid = 0.5 * (lo + hi)
        e = f(mid)
        if e >= target:
            lo = mid
            if e - target <= tol:
                break
        else:
            hi = mid
    return lo, it


def init_cloud(particles, seed: int, t: int = 0, proposals=None) -> ParticleCloud:
    n = len(particles)
    if n < 2:
        raise ValueError("need at least two particles")
    return ParticleCloud(particles, np.zeros(n), t, seed, proposals=proposals)


def _resample(logw, rng, config):
    if config.resampling == "systematic":
        return resample_systematic(logw, rng)
    return resample_multinomial(logw, rng)


def adaptive_temper(cloud: ParticleCloud, model, t: int, logw0: np.ndarray, logu: np.ndarray,
                    config: SMCConfig) -> tuple[ParticleCloud, TemperTrace, float]:
    """Introduce observation t through a sequence of tempered resample-move stages.

    ``logw0`` are the weights before observation t and ``logu`` the
    increments.  Returns the updated cloud (weights reset, states at t), the
    stage trace and the log normalising-constant estimate along the path.
    """
    n = len(logw0)
    target = config.ess_fraction * n
    tol = config.bisect_tol * n
    particles = cloud.particles
    lw_prime = logw0
    phi_prev, stage, log_z = 0.0, 0, 0.0
    trace = TemperTrace(t)
    pending = None
    while phi_prev < 1.0:
        if ess_log(lw_prime + _scaled(logu, 1.0 - phi_prev)) >= target:
            phi = 1.0
        else:
            phi, _ = bisect_exponent(lw_prime, logu, phi_prev, target, tol, config.bisect_max_iter)
            if phi - phi_prev < config.min_step:
                phi = min(1.0, phi_prev + config.min_step)
        lw = lw_prime + _scaled(logu, phi - phi_prev)
        log_z += float(logsumexp(lw) - logsumexp(lw_prime))
        trace.phis.append(phi)
        trace.ess.append(ess_log(lw))
        proposals = model.fit_proposals(particles, lw)
        idx = _resample(lw, stage_rng(config.seed, t, stage, PURPOSE_RESAMPLE), config)
        particles = particles.take(idx)
        particles, logu, pending, info = model.move(
            particles, t, phi, proposals, stage_rng(config.seed, t, stage, PURPOSE_MOVE), config.n_sweeps)
        trace.acceptance.append(info)
        lw_prime = np.zeros(n)
        logu, nq = _quarantine(logu, lw_prime, config.quarantine_limit, t)
        cloud.n_quarantined += nq
        lw_prime = np.where(np.isfinite(logu), 0.0, -np.inf)
        phi_prev = phi
        stage += 1
        cloud.proposals = proposals
    cloud.particles = model.commit(particles, pending, t)
    cloud.logw = lw_prime
    return cloud, trace, log_z


def assimilate(cloud: ParticleCloud, model, t: int, config: SMCConfig) -> tuple[ParticleCloud, float]:
    """Absorb observation ``t`` (the cloud must be at t - 1)."""
    if cloud.t != t - 1:
        raise ValueError(f"cloud is at t={cloud.t}, cannot assimilate t={t}")
    logu, pending = model.increment(cloud.particles, t)
    logu, nq = _quarantine(logu, cloud.logw, config.quarantine_limit, t)
    cloud.n_quarantined += nq
    lw0 = cloud.logw
    log_m = float(logsumexp(lw0 + logu) - logsumexp(lw0))
    lw = lw0 + logu
    n = len(lw)
    if ess_log(lw) >= config.ess_fraction * n:
        cloud.particles = model.commit(cloud.particles, pending, t)
        cloud.logw = lw - np.max(lw)
        log_z = log_m
    else:
        cloud, trace, log_z = adaptive_temper(cloud, model, t, lw0, logu, config)
        cloud.traces.append(trace)
    cloud.t = t
    cloud.log_m.append(log_m)
    cloud.log_m_tempered.append(log_z)
    cloud.times.append(t)
    return cloud, log_m


def run_ibis(cloud: ParticleCloud, model, t_end: int, config: SMCConfig, checkpoint_dir=None,
             callback=None, checkpoint_every: int = 1) -> ParticleCloud:
    """Assimilate observations cloud.t + 1 .. t_end, checkpointing as configured."""
    for t in range(cloud.t + 1, t_end + 1):
        cloud, _ = assimilate(cloud, model, t, config)
        if checkpoint_dir is not None and (t % checkpoint_every == 0 or t == t_end):
            save_checkpoint(cloud, Path(checkpoint_dir) / checkpoint_name(t), config)
        if callback is not None:
            callback(cloud)
    return cloud


def weighted_summary(cloud: ParticleCloud, model) -> dict:
    """Weighted posterior mean, standard deviation and ESS of each summary quantity."""
    w = cloud.weights
    out = {}
    for name, vals in model.summary(cloud.particles).items():
        vals = np.asarray(vals, float)
        mean = float(np.sum(w * vals))
        sd = float(np.sqrt(max(np.sum(w * (vals - mean) ** 2), 0.0)))
        out[name] = {"mean": mean, "sd": sd}
    out["_ess"] = cloud.ess()
    out["_log_evidence"] = cloud.log_evidence
    return out


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_name(t: int) -> str:
    return f"cloud_t{t:05d}.npz"


def latest_checkpoint(directory) -> Path | None:
    files = sorted(Path(directory).glob("cloud_t*.npz"))
    return files[-1] if files else None


def save_checkpoint(cloud: ParticleCloud, path, config: SMCConfig | None = None) -> Path:
    """Binary particle arrays plus a JSON header in one ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "t": cloud.t,
        "seed": cloud.seed,
        "log_m": cloud.log_m,
        "log_m_tempered": cloud.log_m_tempered,
        "times": cloud.times,
        "traces": [asdict(tr) for tr in cloud.traces],
        "n_quarantined": cloud.n_quarantined,
        "proposals": cloud.proposals.to_dict() if hasattr(cloud.proposals, "to_dict") else None,
        "config": asdict(config) if config is not None else None,
    }
    arrays = {f"p_{k}": v for k, v in cloud.particles.arrays().items()}
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, logw=cloud.logw, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8),
             **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path, particle_cls, proposals_cls=None) -> tuple[ParticleCloud, dict]:
    with np.load(path) as f:
        header = json.loads(bytes(f["header"]).decode())
        if header.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"checkpoint schema {header.get('schema')!r} != {CHECKPOINT_SCHEMA!r}")
        arrays = {k[2:]: f[k] for k in f.files if k.startswith("p_")}
        logw = f["logw"]
    t = header["t"]
    props = None
    if header.get("proposals") is not None and proposals_cls is not None:
        props = proposals_cls.from_dict(header["proposals"])
    cloud = ParticleCloud(particle_cls.from_arrays(arrays, t), logw, t, header["seed"],
                          list(header["log_m"]), list(header["log_m_tempered"]), list(header["times"]),
                          [TemperTrace(**tr) for tr in header["traces"]], header["n_quarantined"], props)
    return cloud, header
