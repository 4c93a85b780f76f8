"""Parameters, priors, likelihood, maximum likelihood and block MCMC.

The parameter vector is handled in an unconstrained coordinate system:

=============  ======================================================
k_inf_q        log k_inf
g_q            2 artanh(g_1), then log(g_i - g_{i+1})
Sigma_P        log of the diagonal, then 1e4 x off-diagonal entries
               in row-major lower order (1,0), (2,0), (2,1), ...
Phi_Z          2 artanh(phi_j)
lambda         lambda_12 (restriction M1) or lambda_0, vec(lambda_1) (M0)
=============  ======================================================

sigma_e2 is kept outside the vector and updated by an exact Gibbs step.
Every routine works on a batch of parameter vectors of shape (..., k).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from .data import ModelData
from .pricing import ModelSpec, QParams, pc_system
from .state_space import (
    FilterConstants, KalmanState, LatentSpec, PDynamics, _diag, filter_constants,
    kalman_increment,
)

logger = logging.getLogger(__name__)

OFFDIAG_SCALE = 1e4
DEFAULT_PRIOR_VAR = 1e6
PHI_Z_PRIOR_VAR = 2.0
SIGMA_E2_FLOOR = 1e-14
PROPOSAL_DF = 5.0
PROPOSAL_SCALE = 1.2
BLOCKS = ("sigma_p", "q", "pz")


class MLEFailure(RuntimeError):
    def __init__(self, message, incumbent=None):
        super().__init__(message)
        self.incumbent = incumbent


# ---------------------------------------------------------------------------
# parameter layout and transforms


class ParamLayout:
    """Positions of each parameter inside the unconstrained vector."""

    def __init__(self, spec: ModelSpec):
        R, d = spec.R, spec.n_latent
        self.spec = spec
        self.R, self.d = R, d
        self.tril = np.tril_indices(R, -1)
        n_off = len(self.tril[0])
        n_lam = 1 if spec.restriction == "M1" else R + R * R
        sizes = [("k_inf", 1), ("g", R), ("sp_diag", R), ("sp_off", n_off), ("phi_z", d), ("lam", n_lam)]
        self.slices, start = {}, 0
        for name, n in sizes:
            self.slices[name] = slice(start, start + n)
            start += n
        self.size = start
        rng_ = lambda *names: np.concatenate([np.arange(self.size)[self.slices[n]] for n in names])
        self.blocks = {"sigma_p": rng_("sp_diag", "sp_off"), "q": rng_("k_inf", "g"), "pz": rng_("phi_z", "lam")}
        self.names = self._names()

    def _names(self) -> list[str]:
        R = self.R
        names = ["k_inf_q"] + [f"g_q[{i}]" for i in range(R)]
        names += [f"sigma_p[{i},{i}]" for i in range(R)]
        names += [f"sigma_p[{i},{j}]" for i, j in zip(*self.tril)]
        names += [f"phi_z[{j}]" for j in range(self.d)]
        if self.spec.restriction == "M1":
            names += ["lambda12"]
        else:
            names += [f"lambda0[{i}]" for i in range(R)]
            names += [f"lambda1[{i},{j}]" for i in range(R) for j in range(R)]
        return names


@dataclass
class Theta:
    """Parameter values with arbitrary leading batch dimensions."""

    k_inf_q: np.ndarray
    g_q: np.ndarray
    sigma_p: np.ndarray
    sigma_e2: np.ndarray
    phi_z: np.ndarray
    lambda0: np.ndarray
    lambda1: np.ndarray

    @property
    def lambda12(self) -> np.ndarray:
        return self.lambda1[..., 0, 1]

    def q(self) -> QParams:
        return QParams(self.k_inf_q, self.g_q, self.sigma_p, self.sigma_e2)

    def take(self, idx) -> "Theta":
        return Theta(*(np.asarray(getattr(self, f))[idx] for f in _THETA_FIELDS))


_THETA_FIELDS = ("k_inf_q", "g_q", "sigma_p", "sigma_e2", "phi_z", "lambda0", "lambda1")


def make_theta(spec: ModelSpec, k_inf_q, g_q, sigma_p, sigma_e2, phi_z=(), lambda12=0.0,
               lambda0=None, lambda1=None) -> Theta:
    """Convenience constructor for a single parameter set."""
    R = spec.R
    l0 = np.zeros(R) if lambda0 is None else np.asarray(lambda0, float)
    if lambda1 is None:
        l1 = np.zeros((R, R))
        l1[0, 1] = lambda12
    else:
        l1 = np.asarray(lambda1, float)
    return Theta(np.asarray(k_inf_q, float), np.asarray(g_q, float), np.asarray(sigma_p, float),
                 np.asarray(sigma_e2, float), np.asarray(phi_z, float).reshape(spec.n_latent), l0, l1)


def from_unconstrained(x: np.ndarray, layout: ParamLayout, sigma_e2=0.0) -> Theta:
    x = np.asarray(x, dtype=float)
    sl, R = layout.slices, layout.R
    batch = x.shape[:-1]
    with np.errstate(over="ignore", invalid="ignore"):
        k_inf = np.exp(x[..., sl["k_inf"]][..., 0])
        gx = x[..., sl["g"]]
        g1 = np.tanh(gx[..., :1] / 2.0)
        g = np.concatenate([g1, g1 - np.cumsum(np.exp(gx[..., 1:]), axis=-1)], axis=-1)
        sp = np.zeros(batch + (R, R))
        sp[..., np.arange(R), np.arange(R)] = np.exp(x[..., sl["sp_diag"]])
        sp[..., layout.tril[0], layout.tril[1]] = x[..., sl["sp_off"]] / OFFDIAG_SCALE
        phi_z = np.tanh(x[..., sl["phi_z"]] / 2.0)
    lam = x[..., sl["lam"]]
    l0 = np.zeros(batch + (R,))
    l1 = np.zeros(batch + (R, R))
    if layout.spec.restriction == "M1":
        l1[..., 0, 1] = lam[..., 0]
    else:
        l0 = lam[..., :R].copy()
        l1 = lam[..., R:].reshape(batch + (R, R)).copy()
    s2 = np.broadcast_to(np.asarray(sigma_e2, float), batch).copy()
    return Theta(k_inf, g, sp, s2, phi_z, l0, l1)


def to_unconstrained(theta: Theta, layout: ParamLayout) -> np.ndarray:
    sl, R = layout.slices, layout.R
    g = np.asarray(theta.g_q, float)
    batch = g.shape[:-1]
    x = np.empty(batch + (layout.size,))
    x[..., sl["k_inf"]] = np.log(theta.k_inf_q)[..., None]
    x[..., sl["g"].start] = 2.0 * np.arctanh(g[..., 0])
    x[..., sl["g"].start + 1:sl["g"].stop] = np.log(g[..., :-1] - g[..., 1:])
    sp = np.asarray(theta.sigma_p, float)
    x[..., sl["sp_diag"]] = np.log(sp[..., np.arange(R), np.arange(R)])
    x[..., sl["sp_off"]] = sp[..., layout.tril[0], layout.tril[1]] * OFFDIAG_SCALE
    x[..., sl["phi_z"]] = 2.0 * np.arctanh(theta.phi_z)
    if layout.spec.restriction == "M1":
        x[..., sl["lam"]] = np.asarray(theta.lambda1)[..., 0, 1][..., None]
    else:
        x[..., sl["lam"]] = np.concatenate(
            [theta.lambda0, np.asarray(theta.lambda1).reshape(batch + (R * R,))], axis=-1)
    return x


# ---------------------------------------------------------------------------
# priors


@dataclass
class PriorSpec:
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, float)
        self.variances = np.asarray(self.variances, float)
        if np.any(self.variances <= 0):
            raise ValueError("prior variances must be positive")

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.means) ** 2 / self.variances
        return -0.5 * np.sum(z + np.log(2 * np.pi * self.variances), axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.means + np.sqrt(self.variances) * rng.standard_normal((n, self.means.size))


def default_prior(layout: ParamLayout, n_obs: int) -> PriorSpec:
    """Zero-mean normals: 1e6 by default, 2 for Phi_Z, n_obs for lambda_12."""
    var = np.full(layout.size, DEFAULT_PRIOR_VAR)
    var[layout.slices["phi_z"]] = PHI_Z_PRIOR_VAR
    if layout.spec.restriction == "M1":
        var[layout.slices["lam"]] = float(n_obs)
    return PriorSpec(np.zeros(layout.size), var)


def log_prior_sigma_e2(sigma_e2) -> np.ndarray:
    """Improper inverse-gamma(0, 0) density, p(s2) proportional to 1/s2."""
    return -np.log(sigma_e2)


# ---------------------------------------------------------------------------
# likelihood


def theta_dynamics(theta: Theta, weights, maturities=None):
    """(PDynamics, LoadingsP, valid) for a batch of parameter sets."""
    with np.errstate(all="ignore"):
        lp, mu_q, phi_q, valid = pc_system(theta.q(), weights, maturities)
    dyn = PDynamics(mu_q + theta.lambda0, phi_q + theta.lambda1, theta.sigma_p)
    return dyn, lp, valid


def _latent(theta: Theta, spec: ModelSpec, sigma_z) -> tuple[LatentSpec, np.ndarray]:
    phi = np.asarray(theta.phi_z, float)
    ok = np.all(np.abs(phi) < 1, axis=-1) if spec.n_latent else np.ones(phi.shape[:-1], bool)
    phi_safe = np.where(ok[..., None], phi, 0.0)
    sz = np.zeros(spec.n_latent) if sigma_z is None else np.asarray(sigma_z, float)
    return LatentSpec(phi_safe, sz, spec.latent_mask), ok


@dataclass
class PassResult:
    """Per-period likelihood pieces over t = t_start+1..t_end.

    ``ss`` holds squared norms of the projected pricing errors and ``lp`` the
    Kalman log densities of the factors.  ``state_prev`` is the filter state
    after t_end - 1 and ``state`` after t_end.
    """

    ss: np.ndarray
    lp: np.ndarray
    state_prev: KalmanState
    state: KalmanState
    valid: np.ndarray

    def where(self, mask: np.ndarray, other: "PassResult") -> "PassResult":
        m1 = mask[..., None]
        m2 = mask[..., None, None]
        return PassResult(
            np.where(m1, self.ss, other.ss), np.where(m1, self.lp, other.lp),
            KalmanState(np.where(m1, self.state_prev.a_filt, other.state_prev.a_filt),
                        np.where(m2, self.state_prev.p_filt, other.state_prev.p_filt), self.state_prev.t),
            KalmanState(np.where(m1, self.state.a_filt, other.state.a_filt),
                        np.where(m2, self.state.p_filt, other.state.p_filt), self.state.t),
            np.where(mask, self.valid, other.valid))


def likelihood_pass(theta: Theta, spec: ModelSpec, data: ModelData, t_end: int, sigma_z=None,
                    t_start: int = 0, state: KalmanState | None = None) -> PassResult:
    """Evaluate the likelihood pieces of periods t_start+1..t_end."""
    if not 0 <= t_start < t_end <= data.T:
        raise ValueError(f"invalid period range ({t_start}, {t_end}] for T={data.T}")
    w = data.weights
    dyn, lp_load, valid = theta_dynamics(theta, w)
    lat, ok = _latent(theta, spec, sigma_z)
    valid = valid & ok
    y = data.y[t_start + 1:t_end + 1]
    p = data.p[t_start:t_end + 1]
    with np.errstate(all="ignore"):
        fitted = lp_load.a_p[..., None, :] + np.einsum("...jr,tr->...tj", lp_load.b_p, p[1:])
        r = np.einsum("kj,...tj->...tk", w.w_perp, y - fitted)
        ss = np.sum(r * r, axis=-1)
        s = p[1:] - dyn.mu_p[..., None, :] - np.einsum("...ij,tj->...ti", dyn.phi_p, p[:-1])
        fc = filter_constants(dyn.sigma_p, lat)
        if state is None:
            d = spec.n_latent
            a_f = np.zeros(d)
            p_f = _diag(lat.sigma_z ** 2)
        else:
            a_f, p_f = state.a_filt, state.p_filt
        n = t_end - t_start
        lp = np.empty(s.shape[:-1])
        prev = (a_f, p_f)
        for k in range(n):
            if k == n - 1:
                prev = (a_f, p_f)
            a_f, p_f, lp[..., k] = kalman_increment(a_f, p_f, s[..., k, :], fc)
    batch = lp.shape[:-1]
    valid = valid & fc.valid & np.all(np.isfinite(lp), axis=-1) & np.all(np.isfinite(ss), axis=-1)
    d = spec.n_latent
    bcast = lambda a, tail: np.broadcast_to(a, batch + tail).copy()
    return PassResult(ss, lp,
                      KalmanState(bcast(prev[0], (d,)), bcast(prev[1], (d, d)), t_end - 1),
                      KalmanState(bcast(a_f, (d,)), bcast(p_f, (d, d)), t_end), valid)


def q_loglik(ss, sigma_e2, k: int) -> np.ndarray:
    """Log density of projected pricing errors with squared norm ``ss``."""
    s2 = np.asarray(sigma_e2, float)[..., None] if np.ndim(ss) > np.ndim(sigma_e2) else sigma_e2
    return -0.5 * k * np.log(2 * np.pi * s2) - 0.5 * ss / s2


def tempered_loglik(pr: PassResult, sigma_e2, k: int, phi: float = 1.0) -> np.ndarray:
    """Full weight on all periods but the last, weight ``phi`` on the last."""
    per = q_loglik(pr.ss, sigma_e2, k) + pr.lp
    val = per[..., :-1].sum(axis=-1) + phi * per[..., -1]
    return np.where(pr.valid, val, -np.inf)


def log_posterior(theta: Theta, spec: ModelSpec, data: ModelData, sigma_z=None,
                  temper_phi: float = 1.0, t_idx: int | None = None,
                  prior: PriorSpec | None = None) -> np.ndarray:
    """Log posterior at ``t_idx`` with the last period tempered by ``temper_phi``.

    Includes the normal prior on the unconstrained coordinates and the
    improper 1/sigma_e2 prior.  Invalid parameters give -inf.
    """
    layout = ParamLayout(spec)
    t_idx = data.T if t_idx is None else t_idx
    prior = default_prior(layout, data.T) if prior is None else prior
    with np.errstate(all="ignore"):
        x = to_unconstrained(theta, layout)
    pr = likelihood_pass(theta, spec, data, t_idx, sigma_z)
    k = data.J - spec.R
    val = tempered_loglik(pr, theta.sigma_e2, k, temper_phi) + prior.logpdf(x) + log_prior_sigma_e2(theta.sigma_e2)
    return np.where(np.all(np.isfinite(x), axis=-1), val, -np.inf)


# ---------------------------------------------------------------------------
# Gibbs step for sigma_e2


def sigma_e_posterior(ss: np.ndarray, k: int, phi: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """(alpha_tilde, beta_tilde) of the conditional for sigma_e2.

    ``ss`` has the per-period sums of squares on its last axis; the final
    period enters with weight ``phi``.
    """
    ss = np.asarray(ss, float)
    n_full = ss.shape[-1] - 1
    alpha = (n_full + phi) * k
    beta = ss[..., :-1].sum(axis=-1) + phi * ss[..., -1]
    return np.broadcast_to(alpha, beta.shape).astype(float), beta


def gibbs_sigma_e(ss: np.ndarray, k: int, rng: np.random.Generator, phi: float = 1.0) -> np.ndarray:
    """Draw sigma_e2 ~ InvGamma(alpha~/2, beta~/2), floored at 1e-14."""
    alpha, beta = sigma_e_posterior(ss, k, phi)
    g = rng.gamma(alpha / 2.0)
    with np.errstate(divide="ignore"):
        draw = (beta / 2.0) / g
    return np.maximum(draw, SIGMA_E2_FLOOR)


# ---------------------------------------------------------------------------
# multivariate t block proposals


def _mvt_logpdf(x, loc, chol, df):
    p = x.shape[-1]
    z = np.linalg.solve(chol, np.moveaxis(x - loc, -1, 0).reshape(p, -1))
    z = z.reshape((p,) + np.broadcast_shapes(x.shape, np.shape(loc))[:-1])
    delta = np.sum(z * z, axis=0)
    logdet = np.sum(np.log(np.diag(chol)))
    return (gammaln((df + p) / 2) - gammaln(df / 2) - 0.5 * p * np.log(df * np.pi) - logdet
            - 0.5 * (df + p) * np.log1p(delta / df))


def _psd_chol(cov: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    top = max(vals.max(), 1e-300)
    vals = np.maximum(vals, floor * top)
    return np.linalg.cholesky((vecs * vals) @ vecs.T)


@dataclass
class Proposals:
    """Multivariate t proposals for each block, built from a joint Gaussian.

    With ``conditional`` set, block b is proposed from the t distribution with
    the Gaussian conditional moments of b given the other coordinates; this
    does not depend on the current value of block b, so the move remains an
    independence-type Metropolis-Hastings step.  Otherwise the marginal block
    moments are used.
    """

    mean: np.ndarray
    cov: np.ndarray
    blocks: dict
    df: float = PROPOSAL_DF
    scale: float = PROPOSAL_SCALE
    conditional: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def _block(self, name):
        if name not in self._cache:
            b = np.asarray(self.blocks[name])
            o = np.setdiff1d(np.arange(self.mean.size), b)
            cov = self.cov
            if self.conditional and o.size:
                coo = cov[np.ix_(o, o)]
                cbo = cov[np.ix_(b, o)]
                reg = coo + 1e-12 * np.trace(coo) / o.size * np.eye(o.size)
                a = np.linalg.solve(reg, cbo.T).T
                cond = cov[np.ix_(b, b)] - a @ cbo.T
            else:
                a = np.zeros((b.size, o.size))
                cond = cov[np.ix_(b, b)]
            chol = _psd_chol(cond) * self.scale
            self._cache[name] = (b, o, a, chol)
        return self._cache[name]

    def location(self, name, x):
        b, o, a, _ = self._block(name)
        return self.mean[b] + (x[..., o] - self.mean[o]) @ a.T

    def draw(self, name, x, rng):
        """Propose a new block value; returns (x_new, logq_new, logq_old)."""
        b, _, _, chol = self._block(name)
        loc = self.location(name, x)
        batch = x.shape[:-1]
        z = rng.standard_normal(batch + (b.size,))
        w = rng.chisquare(self.df, size=batch) / self.df
        xb = loc + (z @ chol.T) / np.sqrt(w)[..., None]
        x_new = x.copy()
        x_new[..., b] = xb
        return x_new, _mvt_logpdf(xb, loc, chol, self.df), _mvt_logpdf(x[..., b], loc, chol, self.df)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist(), "df": self.df, "scale": self.scale,
                "conditional": self.conditional, "blocks": {k: np.asarray(v).tolist() for k, v in self.blocks.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "Proposals":
        return cls(np.asarray(d["mean"], float), np.asarray(d["cov"], float),
                   {k: np.asarray(v, int) for k, v in d["blocks"].items()}, d["df"], d["scale"], d["conditional"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def weighted_moments(x: np.ndarray, logw: np.ndarray | None = None):
    if logw is None:
        w = np.full(x.shape[0], 1.0 / x.shape[0])
    else:
        w = np.exp(logw - np.max(logw))
        w /= w.sum()
    mean = w @ x
    dx = x - mean
    cov = (dx * w[:, None]).T @ dx
    return mean, cov


def proposals_from_cloud(x: np.ndarray, logw: np.ndarray | None, layout: ParamLayout,
                         conditional: bool = True) -> Proposals:
    mean, cov = weighted_moments(x, logw)
    return Proposals(mean, cov, layout.blocks, conditional=conditional)


# ---------------------------------------------------------------------------
# MCMC


@dataclass
class ChainState:
    x: np.ndarray  # (C, k)
    sigma_e2: np.ndarray  # (C,)
    pr: PassResult
    accepted: dict = field(default_factory=lambda: {b: 0 for b in BLOCKS})
    proposed: dict = field(default_factory=lambda: {b: 0 for b in BLOCKS})

    def acceptance_rates(self) -> dict:
        return {b: self.accepted[b] / max(self.proposed[b], 1) for b in self.accepted}


class Target:
    """Tempered posterior over the first ``t`` periods of ``data``."""

    def __init__(self, spec: ModelSpec, data: ModelData, t: int, sigma_z=None,
                 prior: PriorSpec | None = None, phi: float = 1.0):
        self.spec = spec
        self.layout = ParamLayout(spec)
        self.data = data
        self.t = t
        self.phi = phi
        self.sigma_z = sigma_z
        self.k = data.J - spec.R
        self.prior = default_prior(self.layout, data.T) if prior is None else prior

    def evaluate(self, x: np.ndarray) -> PassResult:
        theta = from_unconstrained(x, self.layout)
        pr = likelihood_pass(theta, self.spec, self.data, self.t, self.sigma_z)
        pr.valid = pr.valid & np.all(np.isfinite(x), axis=-1)
        return pr

    def log_density(self, x: np.ndarray, sigma_e2: np.ndarray, pr: PassResult) -> np.ndarray:
        val = tempered_loglik(pr, sigma_e2, self.k, self.phi) + self.prior.logpdf(x)
        return np.where(pr.valid, val, -np.inf)

    def start(self, x: np.ndarray, sigma_e2: np.ndarray) -> ChainState:
        return ChainState(np.array(x, float), np.array(sigma_e2, float), self.evaluate(x))


def mcmc_sweep(state: ChainState, target: Target, proposals: Proposals, rng: np.random.Generator) -> ChainState:
    """Gibbs sigma_e2, then independence MH on (Sigma_P), (k_inf, g), (Phi_Z, lambda)."""
    k = target.k
    s2 = gibbs_sigma_e(state.pr.ss, k, rng, target.phi)
    s2 = np.where(state.pr.valid, s2, state.sigma_e2)
    state.sigma_e2 = s2
    cur = target.log_density(state.x, s2, state.pr)
    for name in BLOCKS:
        if len(proposals.blocks[name]) == 0:
            continue
        x_new, lq_new, lq_old = proposals.draw(name, state.x, rng)
        pr_new = target.evaluate(x_new)
        new = target.log_density(x_new, s2, pr_new)
        with np.errstate(invalid="ignore"):
            log_alpha = (new - cur) + (lq_old - lq_new)
        u = rng.random(log_alpha.shape)
        acc = np.isfinite(new) & (np.log(u) < log_alpha)
        state.x = np.where(acc[..., None], x_new, state.x)
        state.pr = pr_new.where(acc, state.pr)
        cur = np.where(acc, new, cur)
        state.accepted[name] += int(acc.sum())
        state.proposed[name] += int(acc.size)
    return state


def run_mcmc(target: Target, x0: np.ndarray, sigma_e2_0: np.ndarray, proposals: Proposals,
             n_sweeps: int, rng: np.random.Generator, burn: int = 0, thin: int = 1,
             adapt_every: int = 0):
    """Run parallel chains; returns (x trace, sigma_e2 trace, final state, proposals).

    Traces have shape (kept_sweeps, C, k).  With ``adapt_every`` > 0 the
    proposal moments are re-estimated from the pooled chains during burn-in.
    """
    state = target.start(x0, sigma_e2_0)
    xs, ss = [], []
    for it in range(n_sweeps):
        state = mcmc_sweep(state, target, proposals, rng)
        if adapt_every and it < burn and (it + 1) % adapt_every == 0:
            proposals = proposals_from_cloud(state.x, None, target.layout, proposals.conditional)
        if it >= burn and (it - burn) % thin == 0:
            xs.append(state.x.copy())
            ss.append(state.sigma_e2.copy())
    if not xs:
        return np.empty((0,) + state.x.shape), np.empty((0,) + state.sigma_e2.shape), state, proposals
    return np.stack(xs), np.stack(ss), state, proposals


# ---------------------------------------------------------------------------
# maximum likelihood


@dataclass
class FitResult:
    x: np.ndarray
    theta: Theta
    sigma_e2: float
    loglik: float
    hessian: np.ndarray
    cov: np.ndarray
    proposals: Proposals
    converged: bool
    hessian_ok: bool
    layout: ParamLayout

    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))


def var1_fit(p: np.ndarray):
    """OLS VAR(1) for the factor series: (mu, Phi, residual covariance)."""
    X = np.column_stack([np.ones(len(p) - 1), p[:-1]])
    coef, *_ = np.linalg.lstsq(X, p[1:], rcond=None)
    resid = p[1:] - X @ coef
    return coef[0], coef[1:].T, resid.T @ resid / (len(resid) - X.shape[1])


class ProfileLikelihood:
    """Log likelihood with sigma_e2 replaced by SS / (n (J - R))."""

    def __init__(self, spec: ModelSpec, data: ModelData, sigma_z=None):
        self.spec, self.data, self.sigma_z = spec, data, sigma_z
        self.layout = ParamLayout(spec)
        self.k = data.J - spec.R
        self.n = data.T

    def sigma_e2_hat(self, pr: PassResult) -> np.ndarray:
        return pr.ss.sum(axis=-1) / (self.n * self.k)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        theta = from_unconstrained(x, self.layout)
        pr = likelihood_pass(theta, self.spec, self.data, self.n, self.sigma_z)
        s2 = self.sigma_e2_hat(pr)
        with np.errstate(all="ignore"):
            val = pr.lp.sum(axis=-1) - 0.5 * self.n * self.k * (np.log(2 * np.pi * s2) + 1.0)
        ok = pr.valid & np.isfinite(val) & (s2 > 0) & np.all(np.isfinite(x), axis=-1)
        return np.where(ok, val, -np.inf)


def _start_points(prof: ProfileLikelihood, rng, n_cand: int, n_keep: int) -> np.ndarray:
    layout, data, spec = prof.layout, prof.data, prof.spec
    R = spec.R
    _, _, cov = var1_fit(data.p)
    sl = layout.slices
    x = np.zeros((n_cand, layout.size))
    chol = np.linalg.cholesky(cov + 1e-20 * np.eye(R))
    x[:, sl["sp_diag"]] = np.log(np.diag(chol))
    x[:, sl["sp_off"]] = chol[layout.tril] * OFFDIAG_SCALE
    x[:, sl["phi_z"]] = 2.0 * np.arctanh(0.5)
    g1 = rng.uniform(0.95, 0.9995, n_cand)
    gaps = np.sort(rng.uniform(0.01, 0.6, (n_cand, R - 1)), axis=1)
    g = np.column_stack([g1, g1[:, None] - gaps]) if R > 1 else g1[:, None]
    x[:, sl["g"].start] = 2.0 * np.arctanh(g[:, 0])
    x[:, sl["g"].start + 1:sl["g"].stop] = np.log(-np.diff(g, axis=1))
    x[:, sl["k_inf"].start] = rng.uniform(np.log(1e-7), np.log(1e-3), n_cand)
    vals = prof(x)
    order = np.argsort(-np.where(np.isfinite(vals), vals, -np.inf))
    return x[order[:n_keep]]


def _grad_batch(f, x, h):
    k = x.size
    pts = np.concatenate([x[None], x + h * np.eye(k), x - h * np.eye(k)])
    v = f(pts)
    with np.errstate(invalid="ignore"):
        return v[0], (v[1:k + 1] - v[k + 1:]) / (2 * h)


def hessian_fd(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central second differences of ``f`` at ``x``, all points in one batch call."""
    k = x.size
    e = np.eye(k) * h
    iu = np.triu_indices(k, 1)
    pts = [x[None], x + e, x - e]
    for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        pts.append(x + si * e[iu[0]] + sj * e[iu[1]])
    v = f(np.concatenate(pts))
    f0, fp, fm = v[0], v[1:k + 1], v[k + 1:2 * k + 1]
    m = len(iu[0])
    off = 2 * k + 1
    fpp, fpm, fmp, fmm = (v[off + i * m: off + (i + 1) * m] for i in range(4))
    H = np.zeros((k, k))
    H[np.arange(k), np.arange(k)] = (fp - 2 * f0 + fm) / h ** 2
    H[iu] = (fpp - fpm - fmp + fmm) / (4 * h ** 2)
    H[iu[1], iu[0]] = H[iu]
    return H


def mle_fit(data: ModelData, spec: ModelSpec, sigma_z=None, rng: np.random.Generator | None = None,
            restarts: int = 3, prior: PriorSpec | None = None, n_candidates: int = 256,
            grad_step: float = 1e-5, hess_step: float = 1e-4, x0: np.ndarray | None = None,
            min_obs: int = 24) -> FitResult:
    """Maximum likelihood in unconstrained coordinates plus proposal moments.

    BFGS on the profile likelihood with central-difference gradients, started
    from the best ``restarts`` of a batch of random candidates (or from
    ``x0``).  The Hessian of the log posterior at the mode, with sigma_e2
    fixed at its estimate, gives the block proposal moments.
    """
    if data.T < min_obs:
        raise MLEFailure(f"maximum likelihood needs at least {min_obs} observations, got {data.T}")
    rng = np.random.default_rng(0) if rng is None else rng
    prof = ProfileLikelihood(spec, data, sigma_z)
    layout = prof.layout
    starts = _start_points(prof, rng, n_candidates, restarts) if x0 is None else np.atleast_2d(x0)
    scale = float(data.T)

    def fun(x):
        f0, g = _grad_batch(prof, x, grad_step)
        if not np.isfinite(f0):
            return 1e10, np.zeros_like(x)
        g = np.where(np.isfinite(g), g, 0.0)
        return -f0 / scale, -g / scale

    best = None
    for x_start in starts:
        res = minimize(fun, x_start, jac=True, method="BFGS", options={"gtol": 1e-6, "maxiter": 2000})
        val = float(prof(res.x[None])[0])
        logger.debug("mle restart: loglik=%.4f success=%s", val, res.success)
        if np.isfinite(val) and (best is None or val > best[1]):
            best = (res.x, val, res.success)
    if best is None:
        raise MLEFailure("no finite likelihood found from any start", incumbent=starts[0])
    x_hat, ll, ok = best
    theta0 = from_unconstrained(x_hat[None], layout)
    pr = likelihood_pass(theta0, spec, data, data.T, sigma_z)
    s2 = float(prof.sigma_e2_hat(pr)[0])
    prior = default_prior(layout, data.T) if prior is None else prior
    target = Target(spec, data, data.T, sigma_z, prior)

    def post(xs):
        return target.log_density(xs, np.full(xs.shape[0], s2), target.evaluate(xs))

    H = hessian_fd(post, x_hat, hess_step)
    neg = -0.5 * (H + H.T)
    try:
        np.linalg.cholesky(neg)
        cov = np.linalg.inv(neg)
        hess_ok = True
    except np.linalg.LinAlgError:
        logger.warning("Hessian not negative definite at the mode; using diagonal curvature")
        d = np.diag(neg)
        cov = np.diag(np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 1e-2))
        hess_ok = False
    theta = from_unconstrained(x_hat, layout, s2)
    props = Proposals(x_hat.copy(), cov, layout.blocks)
    return FitResult(x_hat, theta, s2, ll, H, cov, props, bool(ok), hess_ok, layout)


# ---------------------------------------------------------------------------
# particles and the sequential model


@dataclass
class AtsmParticles:
    x: np.ndarray  # (N, k)
    sigma_e2: np.ndarray  # (N,)
    a_f: np.ndarray  # (N, d)
    p_f: np.ndarray  # (N, d, d)
    ll_p: np.ndarray  # (N,) cumulative factor log likelihood
    ss: np.ndarray  # (N,) cumulative squared pricing errors
    t: int

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx) -> "AtsmParticles":
        return AtsmParticles(self.x[idx], self.sigma_e2[idx], self.a_f[idx], self.p_f[idx],
                             self.ll_p[idx], self.ss[idx], self.t)

    def arrays(self) -> dict:
        return {"x": self.x, "sigma_e2": self.sigma_e2, "a_f": self.a_f, "p_f": self.p_f,
                "ll_p": self.ll_p, "ss": self.ss}

    @classmethod
    def from_arrays(cls, arrs: dict, t: int) -> "AtsmParticles":
        return cls(*(np.asarray(arrs[k]) for k in ("x", "sigma_e2", "a_f", "p_f", "ll_p", "ss")), t)


@dataclass
class Pending:
    """Time-t quantities computed but not yet committed."""

    a_f: np.ndarray
    p_f: np.ndarray
    lp: np.ndarray
    ss: np.ndarray


class AtsmModel:
    """Adapter exposing the term-structure posterior to the particle sampler."""

    def __init__(self, spec: ModelSpec, data: ModelData, sigma_z=None, prior: PriorSpec | None = None,
                 conditional_proposals: bool = True, n_obs_prior: int | None = None):
        self.spec, self.data = spec, data
        self.layout = ParamLayout(spec)
        self.sigma_z = None if sigma_z is None else np.asarray(sigma_z, float)
        self.k = data.J - spec.R
        self.prior = default_prior(self.layout, n_obs_prior or data.T) if prior is None else prior
        self.conditional = conditional_proposals

    def _target(self, t, phi):
        return Target(self.spec, self.data, t, self.sigma_z, self.prior, phi)

    def increment(self, particles: AtsmParticles, t: int):
        """Log u_t for each particle, computed from its filter state at t-1."""
        theta = from_unconstrained(particles.x, self.layout)
        state = KalmanState(particles.a_f, particles.p_f, t - 1)
        pr = likelihood_pass(theta, self.spec, self.data, t, self.sigma_z, t_start=t - 1, state=state)
        logu = q_loglik(pr.ss[:, 0], particles.sigma_e2, self.k) + pr.lp[:, 0]
        logu = np.where(pr.valid, logu, -np.inf)
        return logu, Pending(pr.state.a_filt, pr.state.p_filt, pr.lp[:, 0], pr.ss[:, 0])

    def commit(self, particles: AtsmParticles, pending: Pending, t: int) -> AtsmParticles:
        return AtsmParticles(particles.x, particles.sigma_e2, pending.a_f, pending.p_f,
                             particles.ll_p + pending.lp, particles.ss + pending.ss, t)

    def move(self, particles: AtsmParticles, t: int, phi: float, proposals: Proposals,
             rng: np.random.Generator, n_sweeps: int):
        """Jitter at the tempered target and return the refreshed increment."""
        target = self._target(t, phi)
        state = target.start(particles.x, particles.sigma_e2)
        for _ in range(n_sweeps):
            state = mcmc_sweep(state, target, proposals, rng)
        pr = state.pr
        moved = AtsmParticles(state.x, state.sigma_e2, pr.state_prev.a_filt, pr.state_prev.p_filt,
                              pr.lp[:, :-1].sum(axis=1), pr.ss[:, :-1].sum(axis=1), t - 1)
        logu = q_loglik(pr.ss[:, -1], state.sigma_e2, self.k) + pr.lp[:, -1]
        logu = np.where(pr.valid, logu, -np.inf)
        pending = Pending(pr.state.a_filt, pr.state.p_filt, pr.lp[:, -1], pr.ss[:, -1])
        return moved, logu, pending, state.acceptance_rates()

    def fit_proposals(self, particles: AtsmParticles, logw: np.ndarray) -> Proposals:
        return proposals_from_cloud(particles.x, logw, self.layout, self.conditional)

    def summary(self, particles: AtsmParticles) -> dict:
        return interpretable(particles.x, particles.sigma_e2, self.layout)

    def initial_particles(self, x: np.ndarray, sigma_e2: np.ndarray, t0: int) -> AtsmParticles:
        """Particles conditioned on periods 1..t0 (state at t0)."""
        x = np.asarray(x, float)
        n, d = x.shape[0], self.spec.n_latent
        if t0 == 0:
            sz = np.zeros(d) if self.sigma_z is None else self.sigma_z
            return AtsmParticles(x, np.asarray(sigma_e2, float), np.zeros((n, d)),
                                 np.broadcast_to(_diag(sz ** 2), (n, d, d)).copy(),
                                 np.zeros(n), np.zeros(n), 0)
        theta = from_unconstrained(x, self.layout)
        pr = likelihood_pass(theta, self.spec, self.data, t0, self.sigma_z)
        return AtsmParticles(x, np.asarray(sigma_e2, float), pr.state.a_filt, pr.state.p_filt,
                             pr.lp.sum(axis=1), pr.ss.sum(axis=1), t0)


def interpretable(x: np.ndarray, sigma_e2: np.ndarray, layout: ParamLayout) -> dict:
    """Named constrained-space quantities for each particle."""
    th = from_unconstrained(x, layout, sigma_e2)
    R = layout.R
    out = {"k_inf_q": th.k_inf_q, "sigma_e2": th.sigma_e2}
    for i in range(R):
        out[f"g_q[{i}]"] = th.g_q[..., i]
        out[f"sigma_p[{i},{i}]"] = th.sigma_p[..., i, i]
    for j in range(layout.d):
        out[f"phi_z[{j}]"] = th.phi_z[..., j]
    if layout.spec.restriction == "M1":
        out["lambda12"] = th.lambda12
    return out


def warm_start(model: AtsmModel, t0: int, n: int, rng: np.random.Generator, n_sweeps: int = 200,
               fit: FitResult | None = None, adapt_every: int = 25) -> tuple[AtsmParticles, Proposals]:
    """Posterior draws given periods 1..t0 from ``n`` parallel MCMC chains."""
    head = model.data.head(t0)
    if fit is None:
        fit = mle_fit(head, model.spec, model.sigma_z, rng=rng)
    target = Target(model.spec, model.data, t0, model.sigma_z, model.prior)
    chol = _psd_chol(fit.cov)
    x0 = fit.x + 0.5 * rng.standard_normal((n, fit.x.size)) @ chol.T
    pr0 = target.evaluate(x0)
    bad = ~pr0.valid
    x0[bad] = fit.x
    s2 = np.full(n, fit.sigma_e2)
    props = Proposals(fit.x.copy(), fit.cov, model.layout.blocks, conditional=model.conditional)
    _, _, state, props = run_mcmc(target, x0, s2, props, n_sweeps, rng, burn=n_sweeps,
                                  adapt_every=adapt_every)
    logger.info("warm start acceptance: %s", state.acceptance_rates())
    particles = AtsmParticles(state.x, state.sigma_e2, state.pr.state.a_filt, state.pr.state.p_filt,
                              state.pr.lp.sum(axis=1), state.pr.ss.sum(axis=1), t0)
    return particles, proposals_from_cloud(state.x, None, model.layout, model.conditional)
