"""Synthetic panels drawn from the latent-factor model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ModelData
from .inference import Theta, make_theta, theta_dynamics
from .pricing import ModelSpec, PCWeights, QParams, reference_weights

SIM_MATURITIES = (1, 12, 23, 24, 35, 36, 59, 60, 84, 120)


class ExplosiveDynamics(ValueError):
    pass


@dataclass
class Truth:
    spec: ModelSpec
    theta: Theta
    sigma_z: np.ndarray
    weights: PCWeights


@dataclass
class SimulatedPanel:
    y: np.ndarray  # (T + 1, J) per-month decimal
    p: np.ndarray  # (T + 1, R)
    z: np.ndarray  # (T + 1, d) latent Z_t
    alpha: np.ndarray  # (T + 1, d) alpha_t = Z_{t-1}
    truth: Truth

    def model_data(self) -> ModelData:
        return ModelData(self.y, self.truth.weights, self.p)


def default_truth(name: str = "LF010", maturities=SIM_MATURITIES, c: float = 0.6,
                  phi_z: float = 0.9, lambda12: float = -0.02) -> Truth:
    """A stable calibration in monthly decimal units.

    ``c`` has the meaning used by the tuning step: Sigma_Z = c sqrt((1 - phi^2)
    Var(s)) where Var(s) is the population variance of the factor residual,
    latent contribution included.  Solving for Sigma_Z gives
    Sigma_Z^2 = c^2 (1 - phi^2) C_kk / (1 - c^2), so 0 <= c < 1.
    """
    if not 0 <= c < 1:
        raise ValueError("c must lie in [0, 1)")
    spec = ModelSpec.from_name(name, maturities)
    sigma_p = np.array([[5e-4, 0.0, 0.0], [-1.0e-4, 2.2e-4, 0.0], [2e-5, -1e-5, 8e-5]])
    q = QParams(2.4e-5, np.array([0.997, 0.95, 0.85]), sigma_p)
    weights = reference_weights(q, spec.maturities)
    d = spec.n_latent
    theta = make_theta(spec, 2.4e-5, [0.997, 0.95, 0.85], sigma_p, 1.6e-9,
                       phi_z=np.full(d, phi_z), lambda12=lambda12)
    var_s = np.einsum("ij,ij->i", sigma_p, sigma_p)
    sz = c * np.sqrt((1 - phi_z ** 2) * var_s[spec.latent_index] / (1 - c ** 2))
    return Truth(spec, theta, sz, weights)


def stationary_mean(mu: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return np.linalg.solve(np.eye(len(mu)) - phi, mu)


def simulate_panel(truth: Truth, T: int, seed: int, p0=None) -> SimulatedPanel:
    """Simulate P_{0:T}, Z and yields with pricing errors in the null space of W.

    Pricing errors are drawn as W_perp' eta with eta ~ N(0, sigma_e2 I), so the
    PCs computed from simulated yields reproduce the simulated factors.
    """
    spec, theta, w = truth.spec, truth.theta, truth.weights
    rng = np.random.default_rng(seed)
    dyn, lp, valid = theta_dynamics(theta, w)
    if not bool(valid):
        raise ValueError("invalid truth parameters")
    rho = np.max(np.abs(np.linalg.eigvals(dyn.phi_p)))
    if rho >= 1:
        raise ExplosiveDynamics(f"physical feedback has spectral radius {rho:.6f}")
    d, R = spec.n_latent, spec.R
    idx = spec.latent_index
    phi_z = np.asarray(theta.phi_z, float)
    sz = np.asarray(truth.sigma_z, float)
    p = np.empty((T + 1, R))
    p[0] = stationary_mean(dyn.mu_p, dyn.phi_p) if p0 is None else p0
    alpha = np.empty((T + 2, d))
    alpha[0] = sz * rng.standard_normal(d)
    for t in range(1, T + 2):
        alpha[t] = phi_z * alpha[t - 1] + sz * rng.standard_normal(d)
    eps = rng.standard_normal((T, R))
    for t in range(1, T + 1):
        m = dyn.mu_p + dyn.phi_p @ p[t - 1]
        m[idx] += alpha[t]
        p[t] = m + dyn.sigma_p @ eps[t - 1]
    eta = np.sqrt(float(theta.sigma_e2)) * rng.standard_normal((T + 1, w.w_perp.shape[0]))
    y = lp.a_p + p @ lp.b_p.T + eta @ w.w_perp
    return SimulatedPanel(y, p, alpha[1:], alpha[:-1], truth)
