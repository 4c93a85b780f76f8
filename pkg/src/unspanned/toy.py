"""Gaussian random walk with unknown drift, a one-parameter test model.

y_t = y_{t-1} + mu + sigma eps_t with sigma known and mu ~ N(m0, tau^2).
Its evidence is a one-dimensional integral, which makes it a convenient
check of the sequential sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import logsumexp
from scipy.stats import norm


@dataclass
class DriftParticles:
    mu: np.ndarray
    t: int = 0

    def __len__(self):
        return self.mu.shape[0]

    def take(self, idx) -> "DriftParticles":
        return DriftParticles(self.mu[idx], self.t)

    def arrays(self) -> dict:
        return {"mu": self.mu}

    @classmethod
    def from_arrays(cls, arrs, t):
        return cls(np.asarray(arrs["mu"]), t)


@dataclass
class DriftProposal:
    loc: float
    scale: float


class DriftModel:
    def __init__(self, y: np.ndarray, sigma: float = 1.0, m0: float = 0.0, tau: float = 1.0):
        self.y = np.asarray(y, float)
        self.dy = np.diff(self.y)
        self.sigma, self.m0, self.tau = sigma, m0, tau

    def sample_prior(self, n: int, rng: np.random.Generator) -> DriftParticles:
        return DriftParticles(self.m0 + self.tau * rng.standard_normal(n), 0)

    def _inc(self, mu, t):
        return norm.logpdf(self.dy[t - 1], mu, self.sigma)

    def log_target(self, mu, t, phi):
        """Prior + full increments up to t-1 + phi times increment t."""
        s = self.dy[: t - 1]
        n = s.size
        full = -0.5 * n * np.log(2 * np.pi * self.sigma ** 2) - 0.5 * (
            np.sum(s ** 2) - 2 * mu * s.sum() + n * mu ** 2) / self.sigma ** 2
        return norm.logpdf(mu, self.m0, self.tau) + full + phi * self._inc(mu, t)

    def increment(self, particles, t):
        return self._inc(particles.mu, t), None

    def commit(self, particles, pending, t):
        return DriftParticles(particles.mu, t)

    def fit_proposals(self, particles, logw):
        w = np.exp(logw - logw.max())
        w /= w.sum()
        m = float(w @ particles.mu)
        sd = float(np.sqrt(w @ (particles.mu - m) ** 2))
        return DriftProposal(m, 1.2 * max(sd, 1e-12))

    def move(self, particles, t, phi, proposal, rng, n_sweeps):
        mu = particles.mu.copy()
        cur = self.log_target(mu, t, phi)
        acc = 0
        for _ in range(n_sweeps):
            new = proposal.loc + proposal.scale * rng.standard_t(5, size=mu.shape)
            lt = self.log_target(new, t, phi)
            lq_new = _t_logpdf(new, proposal)
            lq_old = _t_logpdf(mu, proposal)
            ok = np.log(rng.random(mu.shape)) < (lt - cur) + (lq_old - lq_new)
            mu = np.where(ok, new, mu)
            cur = np.where(ok, lt, cur)
            acc += int(ok.sum())
        moved = DriftParticles(mu, t - 1)
        return moved, self._inc(mu, t), None, {"mu": acc / (n_sweeps * mu.size)}

    def summary(self, particles):
        return {"mu": particles.mu}

    def log_evidence_quadrature(self, t_end: int | None = None) -> float:
        """log integral of prior x likelihood over mu by adaptive quadrature."""
        s = self.dy if t_end is None else self.dy[:t_end]
        n = s.size
        post_var = 1.0 / (1.0 / self.tau ** 2 + n / self.sigma ** 2)
        post_mean = post_var * (self.m0 / self.tau ** 2 + s.sum() / self.sigma ** 2)
        f = lambda mu: norm.logpdf(mu, self.m0, self.tau) + norm.logpdf(s, mu, self.sigma).sum()
        ref = f(post_mean)
        half = 40.0 * np.sqrt(post_var)
        val, _ = integrate.quad(lambda mu: np.exp(f(mu) - ref), post_mean - half, post_mean + half,
                                epsabs=0.0, epsrel=1e-12, limit=200, points=[post_mean])
        return float(ref + np.log(val))


def _t_logpdf(x, prop: DriftProposal):
    from scipy.stats import t as student_t

    return student_t.logpdf(x, 5, prop.loc, prop.scale)


def log_mean_exp(a) -> float:
    a = np.asarray(a, float)
    return float(logsumexp(a) - np.log(a.size))
