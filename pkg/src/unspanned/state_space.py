"""Physical dynamics of the PCs with unspanned latent drift.

The factor equation is

    P_t = mu + Phi P_{t-1} + S Z_{t-1} + Sigma_P eps_t
    Z_t = Phi_Z Z_{t-1} + Sigma_Z eta_t

with ``S`` the R x d selection matrix implied by the latent mask.  Writing
``alpha_t = Z_{t-1}`` and ``s_t = P_t - mu - Phi P_{t-1}`` gives a linear
Gaussian state space in which ``s_t`` is observed.  The filter is run one
step at a time (predict, then update) starting from a_{0|0} = 0 and
P_{0|0} = Sigma_Z Sigma_Z'.

Two implementations are provided.  :func:`kalman_step` follows the textbook
prediction/update equations for a single parameter set.  :func:`kalman_pass`
and :func:`kalman_increment` use the information form, which needs only
d x d inverses, and operate on a whole batch of parameter sets at once.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

logger = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)
PSD_TOL = -1e-10


class NumericalFailure(ArithmeticError):
    """A covariance that should be positive definite is not."""


@dataclass
class PDynamics:
    mu_p: np.ndarray  # (..., R)
    phi_p: np.ndarray  # (..., R, R)
    sigma_p: np.ndarray  # (..., R, R) lower triangular

    def __post_init__(self):
        self.mu_p = np.asarray(self.mu_p, dtype=float)
        self.phi_p = np.asarray(self.phi_p, dtype=float)
        self.sigma_p = np.asarray(self.sigma_p, dtype=float)

    @property
    def R(self) -> int:
        return self.mu_p.shape[-1]

    @property
    def cov(self) -> np.ndarray:
        return self.sigma_p @ np.swapaxes(self.sigma_p, -1, -2)


@dataclass
class LatentSpec:
    phi_z: np.ndarray  # (..., d) diagonal of Phi_Z
    sigma_z: np.ndarray  # (..., d) diagonal of Sigma_Z
    mask: tuple[bool, ...]

    def __post_init__(self):
        self.phi_z = np.asarray(self.phi_z, dtype=float)
        self.sigma_z = np.asarray(self.sigma_z, dtype=float)
        self.mask = tuple(bool(m) for m in self.mask)
        d = sum(self.mask)
        if self.phi_z.shape[-1:] != (d,) and not (d == 0 and self.phi_z.size == 0):
            raise ValueError(f"phi_z must have trailing dimension {d}")
        if np.any(np.abs(self.phi_z) >= 1):
            raise ValueError("latent autoregression must be stationary (|phi_z| < 1)")
        if np.any(self.sigma_z < 0):
            raise ValueError("sigma_z must be non-negative")

    @property
    def d(self) -> int:
        return sum(self.mask)

    @property
    def selection(self) -> np.ndarray:
        return selection_matrix(self.mask)


@dataclass
class KalmanState:
    a_filt: np.ndarray  # (..., d)
    p_filt: np.ndarray  # (..., d, d)
    t: int = 0

    def copy(self) -> "KalmanState":
        return KalmanState(self.a_filt.copy(), self.p_filt.copy(), self.t)

    def take(self, idx) -> "KalmanState":
        return KalmanState(self.a_filt[idx], self.p_filt[idx], self.t)


def selection_matrix(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return np.eye(mask.size)[:, mask]


def initial_state(lat: LatentSpec) -> KalmanState:
    """a_{0|0} = 0 and P_{0|0} = Sigma_Z Sigma_Z'."""
    sz = lat.sigma_z
    return KalmanState(np.zeros(sz.shape), _diag(sz * sz), 0)


def _diag(v: np.ndarray) -> np.ndarray:
    return v[..., :, None] * np.eye(v.shape[-1])


def physical_dynamics(mu_q, phi_q, sigma_p, lambda0=None, lambda1=None) -> PDynamics:
    """mu_P^P = mu_P^Q + lambda0 and Phi_P^P = Phi_P^Q + lambda1."""
    mu = np.asarray(mu_q, dtype=float)
    phi = np.asarray(phi_q, dtype=float)
    if lambda0 is not None:
        mu = mu + lambda0
    if lambda1 is not None:
        phi = phi + lambda1
    return PDynamics(mu, phi, sigma_p)


def factor_innovations(p: np.ndarray, dyn: PDynamics) -> np.ndarray:
    """s_t = P_t - mu - Phi P_{t-1} for t = 1..T, shape (..., T, R)."""
    p = np.asarray(p, dtype=float)
    pred = np.einsum("...ij,tj->...ti", dyn.phi_p, p[:-1]) if p.ndim == 2 else \
        np.einsum("...ij,...tj->...ti", dyn.phi_p, p[..., :-1, :])
    return p[1:] - dyn.mu_p[..., None, :] - pred


# ---------------------------------------------------------------------------
# textbook filter, one parameter set


def kalman_step(state: KalmanState, p_prev, p_curr, dyn: PDynamics, lat: LatentSpec):
    """Advance the filter by one observation and return the log density."""
    p_prev = np.asarray(p_prev, dtype=float)
    p_curr = np.asarray(p_curr, dtype=float)
    R = dyn.R
    if p_prev.shape != (R,) or p_curr.shape != (R,):
        raise ValueError("factor vectors must have length R")
    s = p_curr - dyn.mu_p - dyn.phi_p @ p_prev
    H = dyn.cov
    if lat.d == 0:
        F = H
        v = s
        new = KalmanState(state.a_filt, state.p_filt, state.t + 1)
    else:
        S = lat.selection
        T_ = np.diag(lat.phi_z)
        Q = np.diag(lat.sigma_z ** 2)
        a_pred = T_ @ state.a_filt
        P_pred = T_ @ state.p_filt @ T_.T + Q
        v = s - S @ a_pred
        F = S @ P_pred @ S.T + H
    try:
        L = np.linalg.cholesky(F)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"F_t not positive definite at t={state.t + 1}") from exc
    w = np.linalg.solve(L, v)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    ll = -0.5 * R * LOG2PI - 0.5 * (logdet + w @ w)
    if lat.d > 0:
        K = P_pred @ S.T @ np.linalg.inv(F)
        a_f = a_pred + K @ v
        P_f = P_pred - K @ S @ P_pred
        P_f = 0.5 * (P_f + P_f.T)
        if np.linalg.eigvalsh(P_f).min() < PSD_TOL * max(1.0, np.abs(P_pred).max()):
            raise NumericalFailure("filtered covariance lost positive semi-definiteness")
        new = KalmanState(a_f, P_f, state.t + 1)
    return new, float(ll)


def kalman_loglik_reference(p, dyn: PDynamics, lat: LatentSpec) -> tuple[float, KalmanState]:
    """Sum of :func:`kalman_step` log densities over a factor path P_{0:T}."""
    p = np.asarray(p, dtype=float)
    if p.shape[0] < 2:
        raise ValueError("need at least one transition (T >= 1)")
    state = initial_state(lat)
    total = 0.0
    for t in range(1, p.shape[0]):
        state, ll = kalman_step(state, p[t - 1], p[t], dyn, lat)
        total += ll
    return total, state


# ---------------------------------------------------------------------------
# batched information-form filter


@dataclass
class FilterConstants:
    """Per-parameter quantities that do not change over time."""

    c_inv: np.ndarray  # (..., R, R)
    logdet_c: np.ndarray  # (...,)
    m: np.ndarray  # (..., d, d) = S' C^{-1} S
    phi_z: np.ndarray  # (..., d)
    q_z: np.ndarray  # (..., d) = sigma_z ** 2
    mask: tuple[bool, ...]
    valid: np.ndarray = field(default=None)

    @property
    def d(self) -> int:
        return sum(self.mask)


def filter_constants(sigma_p: np.ndarray, lat: LatentSpec) -> FilterConstants:
    sigma_p = np.asarray(sigma_p, dtype=float)
    diag = np.diagonal(sigma_p, axis1=-2, axis2=-1)
    valid = np.all(diag > 0, axis=-1)
    safe = np.where(valid[..., None, None], sigma_p, np.eye(sigma_p.shape[-1]))
    l_inv = np.linalg.inv(safe)
    c_inv = np.swapaxes(l_inv, -1, -2) @ l_inv
    logdet_c = 2.0 * np.sum(np.log(np.abs(np.diagonal(safe, axis1=-2, axis2=-1))), axis=-1)
    idx = np.flatnonzero(lat.mask)
    m = c_inv[..., idx[:, None], idx[None, :]]
    return FilterConstants(c_inv, logdet_c, m, lat.phi_z, lat.sigma_z ** 2, lat.mask, valid)


def kalman_increment(a_f, p_f, s_t, fc: FilterConstants):
    """One batched predict/update step.

    ``s_t`` has shape (..., R).  Returns (a_f, p_f, log density).
    """
    R = s_t.shape[-1]
    cs = np.einsum("...ij,...j->...i", fc.c_inv, s_t)
    q = np.einsum("...i,...i->...", s_t, cs)
    if fc.d == 0:
        ll = -0.5 * R * LOG2PI - 0.5 * (fc.logdet_c + q)
        return a_f, p_f, ll
    idx = np.flatnonzero(fc.mask)
    y = cs[..., idx]
    phi = fc.phi_z
    a_pred = phi * a_f
    p_pred = phi[..., :, None] * p_f * phi[..., None, :] + _diag(fc.q_z)
    my = np.einsum("...ij,...j->...i", fc.m, a_pred)
    u = y - my
    if fc.d == 1:
        mp = fc.m[..., 0, 0] * p_pred[..., 0, 0]
        det = 1.0 + mp
        g = p_pred / det[..., None, None]
        logdet = np.log(det)
    else:
        ipm = np.eye(fc.d) + fc.m @ p_pred
        sign, logdet = np.linalg.slogdet(ipm)
        g = p_pred @ np.linalg.inv(ipm)
        g = 0.5 * (g + np.swapaxes(g, -1, -2))
        logdet = np.where(sign > 0, logdet, np.nan)
    gu = np.einsum("...ij,...j->...i", g, u)
    quad = q - 2.0 * np.einsum("...i,...i->...", a_pred, y) + np.einsum("...i,...i->...", a_pred, my) \
        - np.einsum("...i,...i->...", u, gu)
    ll = -0.5 * R * LOG2PI - 0.5 * (fc.logdet_c + logdet + quad)
    return a_pred + gu, g, ll


def kalman_pass(p, dyn: PDynamics, lat: LatentSpec, state: KalmanState | None = None,
                return_path: bool = False):
    """Run the batched filter over the factor path ``p`` (shape (T+1, R)).

    Returns the per-step log densities (..., T), the final state and, when
    ``return_path`` is set, the filtered means a_{t|t} for t = 1..T.
    """
    p = np.asarray(p, dtype=float)
    if p.shape[0] < 2:
        raise ValueError("need at least one transition (T >= 1)")
    s = factor_innovations(p, dyn)
    fc = filter_constants(dyn.sigma_p, lat)
    if state is None:
        state = initial_state(lat)
    a_f, p_f = state.a_filt, state.p_filt
    T = s.shape[-2]
    lls = np.empty(s.shape[:-1])
    path = np.empty(s.shape[:-1] + (lat.d,)) if return_path else None
    for t in range(T):
        a_f, p_f, lls[..., t] = kalman_increment(a_f, p_f, s[..., t, :], fc)
        if return_path:
            path[..., t, :] = a_f
    lls = np.where(fc.valid[..., None], lls, -np.inf)
    final = KalmanState(a_f, p_f, state.t + T)
    if return_path:
        return lls, final, path
    return lls, final


def kalman_loglik(p, dyn: PDynamics, lat: LatentSpec) -> tuple[np.ndarray, KalmanState]:
    """Total log likelihood of P_{1:T} given P_0, plus the final filter state."""
    lls, final = kalman_pass(p, dyn, lat)
    return lls.sum(axis=-1), final


def filtered_latent(p, dyn: PDynamics, lat: LatentSpec) -> np.ndarray:
    """E[Z_t | P_{0:t}] = Phi_Z a_{t|t} for t = 1..T (filtered, not smoothed)."""
    _, _, path = kalman_pass(p, dyn, lat, return_path=True)
    return lat.phi_z[..., None, :] * path


def dense_loglik(p, dyn: PDynamics, lat: LatentSpec) -> float:
    """Log density of the stacked innovations s_{1:T} as one Gaussian.

    Independent check of the filter: builds the full TR x TR covariance.
    """
    from scipy.stats import multivariate_normal

    p = np.asarray(p, dtype=float)
    s = factor_innovations(p, dyn)
    T, R = s.shape
    C = dyn.cov
    cov = np.kron(np.eye(T), C)
    if lat.d:
        S = lat.selection
        phi = np.diag(lat.phi_z)
        q = np.diag(lat.sigma_z ** 2)
        var = [None] * T
        v = q.copy()  # Var(alpha_0)
        for t in range(T):
            v = phi @ v @ phi.T + q
            var[t] = v
        for t in range(T):
            for u in range(t, T):
                cu = np.linalg.matrix_power(phi, u - t) @ var[t]
                block = S @ cu.T @ S.T
                cov[u * R:(u + 1) * R, t * R:(t + 1) * R] += block
                if u != t:
                    cov[t * R:(t + 1) * R, u * R:(u + 1) * R] += block.T
    return float(multivariate_normal(np.zeros(T * R), cov).logpdf(s.ravel()))


# ---------------------------------------------------------------------------
# predictive draws


def latent_predictive_draw(state: KalmanState, p_t, dyn: PDynamics, lat: LatentSpec,
                           rng: np.random.Generator, horizon: int = 1) -> np.ndarray:
    """Draw P_{t+h} given the filter state at t.

    alpha ~ N(a_{t|t}, P_{t|t}); then h times alpha <- Phi_Z alpha + Sigma_Z eta
    and P <- mu + Phi P + S alpha + Sigma_P eps, reusing one trajectory.
    Batch dimensions of the state and dynamics broadcast together.
    """
    p = np.asarray(p_t, dtype=float)
    batch = np.broadcast_shapes(dyn.mu_p.shape[:-1], state.a_filt.shape[:-1], p.shape[:-1])
    p = np.broadcast_to(p, batch + (dyn.R,)).copy()
    d = lat.d
    if d:
        pf = np.broadcast_to(state.p_filt, batch + (d, d))
        try:
            L = np.linalg.cholesky(pf + 1e-300 * np.eye(d))
        except np.linalg.LinAlgError:
            vals, vecs = np.linalg.eigh(pf)
            if np.any(vals < PSD_TOL * np.maximum(1.0, np.abs(pf).max())):
                raise NumericalFailure("filtered covariance is not positive semi-definite")
            L = vecs * np.sqrt(np.clip(vals, 0, None))[..., None, :]
        alpha = state.a_filt + np.einsum("...ij,...j->...i", L, rng.standard_normal(batch + (d,)))
        idx = np.flatnonzero(lat.mask)
    for _ in range(horizon):
        mean = dyn.mu_p + np.einsum("...ij,...j->...i", dyn.phi_p, p)
        if d:
            alpha = lat.phi_z * alpha + lat.sigma_z * rng.standard_normal(batch + (d,))
            mean[..., idx] += alpha
        p = mean + np.einsum("...ij,...j->...i", dyn.sigma_p, rng.standard_normal(batch + (dyn.R,)))
    return p


# ---------------------------------------------------------------------------
# Sigma_Z tuning


def sigma_z_from_c(c, phi_z, var_s, mask) -> np.ndarray:
    """Sigma_Z,jj = c * sqrt((1 - phi_j^2) Var(s_{k_j})), k_j the slot of latent j."""
    var = np.asarray(var_s, dtype=float)[np.flatnonzero(mask)]
    phi_z = np.asarray(phi_z, dtype=float)
    c = np.asarray(c, dtype=float)
    return c[..., None] * np.sqrt((1.0 - phi_z ** 2) * var) if c.ndim else c * np.sqrt((1.0 - phi_z ** 2) * var)


@dataclass
class TuningRecord:
    sigma_z: np.ndarray
    phi_z_init: np.ndarray
    c: float
    loglik: float
    mask: tuple[bool, ...] = ()

    def to_json(self) -> str:
        return json.dumps({"sigma_z": np.asarray(self.sigma_z).tolist(),
                           "phi_z_init": np.asarray(self.phi_z_init).tolist(),
                           "c": float(self.c), "loglik": float(self.loglik),
                           "mask": list(self.mask)}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TuningRecord":
        d = json.loads(text)
        return cls(np.asarray(d["sigma_z"], float), np.asarray(d["phi_z_init"], float),
                   float(d["c"]), float(d["loglik"]), tuple(d.get("mask", ())))


def fit_latent_scale(s_hat: np.ndarray, sigma_p: np.ndarray, mask, rng: np.random.Generator,
                     restarts: int = 5) -> TuningRecord:
    """Maximise the innovation likelihood over (Phi_Z, c) with Sigma_Z tied to c.

    ``s_hat`` holds residuals s_t (T x R) evaluated at a fixed parameter set;
    ``sigma_p`` is the matching innovation Cholesky factor.  The optimisation
    runs on (logit-scaled Phi_Z, log c) with a simplex search.
    """
    s_hat = np.asarray(s_hat, dtype=float)
    mask = tuple(bool(m) for m in mask)
    d = sum(mask)
    if d == 0:
        raise ValueError("mask selects no latent factor")
    var_s = s_hat.var(axis=0, ddof=1)
    R = s_hat.shape[1]
    p_path = np.zeros((s_hat.shape[0] + 1, R))
    p_path[1:] = s_hat
    # with mu = 0 and Phi = 0 the innovations are the path itself
    dyn = PDynamics(np.zeros(R), np.zeros((R, R)), sigma_p)

    def unpack(x):
        phi = np.tanh(x[:d] / 2.0)
        return phi, np.exp(x[d])

    def negll(x):
        phi, c = unpack(x)
        if not np.all(np.isfinite(phi)) or np.any(np.abs(phi) >= 1) or not np.isfinite(c):
            return 1e300
        lat = LatentSpec(phi, sigma_z_from_c(c, phi, var_s, mask), mask)
        val = kalman_loglik(p_path, dyn, lat)[0]
        return -float(val) if np.isfinite(val) else 1e300

    best = None
    for r in range(restarts):
        x0 = np.concatenate([rng.uniform(-1.0, 4.0, d), [rng.uniform(np.log(0.01), np.log(1.0))]])
        if r == 0:
            x0 = np.concatenate([np.full(d, 2.0 * np.arctanh(0.9)), [np.log(0.1)]])
        res = minimize(negll, x0, method="Nelder-Mead",
                       options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": 4000, "maxfev": 8000})
        if best is None or res.fun < best.fun:
            best = res
    phi, c = unpack(best.x)
    return TuningRecord(sigma_z_from_c(c, phi, var_s, mask), phi, float(c), -float(best.fun), mask)


def tune_sigma_z(data, spec, rng: np.random.Generator, restarts: int = 5,
                 mle_restarts: int = 3) -> TuningRecord:
    """Three-step in-sample tuning of Sigma_Z.

    1. maximum likelihood for the yields-only model with lambda_12 free;
    2. residuals s_t at that estimate;
    3. maximise the latent-augmented likelihood of the residuals over
       (Phi_Z, c).
    """
    from .inference import mle_fit, theta_dynamics
    from .pricing import ModelSpec

    base = ModelSpec(spec.R, (False,) * spec.R, spec.maturities, "M1")
    fit = mle_fit(data, base, rng=rng, restarts=mle_restarts)
    dyn, _, _ = theta_dynamics(fit.theta, data.weights)
    s_hat = factor_innovations(data.p, dyn)
    rec = fit_latent_scale(s_hat, fit.theta.sigma_p, spec.latent_mask, rng, restarts=restarts)
    logger.info("tuned Sigma_Z: c=%.4g phi=%s loglik=%.3f", rec.c, rec.phi_z_init, rec.loglik)
    return rec
