"""Gaussian affine bond pricing under the JSZ normalization.

All quantities are in monthly decimal units: a yield of 6% per annum is
``0.005``.  Every function accepts parameters with arbitrary leading batch
dimensions so that a whole particle cloud can be priced in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space

MAX_MATURITY = 1200
COND_CAP = 1e10
LOADING_CAP = 1e12

_RESTRICTIONS = ("M0", "M1")


class PricingError(ValueError):
    """Raised when loadings cannot be formed for a parameter set."""


@dataclass(frozen=True)
class ModelSpec:
    """Model family selector.

    ``latent_mask[k]`` switches on an unspanned latent factor in the k-th
    factor equation.  An all-false mask is the yields-only model.
    """

    R: int = 3
    latent_mask: tuple[bool, ...] = (False, False, False)
    maturities: tuple[int, ...] = (12, 24, 36, 48, 60, 84, 120)
    restriction: str = "M1"

    def __post_init__(self):
        object.__setattr__(self, "latent_mask", tuple(bool(m) for m in self.latent_mask))
        object.__setattr__(self, "maturities", tuple(int(m) for m in self.maturities))
        if self.R < 1:
            raise ValueError("R must be at least 1")
        if len(self.latent_mask) != self.R:
            raise ValueError(f"latent_mask has length {len(self.latent_mask)}, expected R={self.R}")
        mats = np.asarray(self.maturities)
        if mats.size <= self.R:
            raise ValueError("need more maturities than factors")
        if np.any(np.diff(mats) <= 0) or mats[0] < 1:
            raise ValueError("maturities must be positive and strictly increasing")
        if self.restriction not in _RESTRICTIONS:
            raise ValueError(f"restriction must be one of {_RESTRICTIONS}")
        if self.restriction == "M1" and self.R < 2:
            raise ValueError("the lambda_12 restriction needs R >= 2")

    @property
    def J(self) -> int:
        return len(self.maturities)

    @property
    def n_latent(self) -> int:
        return int(sum(self.latent_mask))

    @property
    def latent_index(self) -> np.ndarray:
        return np.flatnonzero(self.latent_mask)

    @property
    def name(self) -> str:
        if self.n_latent == 0:
            return self.restriction
        return "LF" + "".join("1" if m else "0" for m in self.latent_mask)

    @classmethod
    def from_name(cls, name: str, maturities=None, R: int = 3) -> "ModelSpec":
        """Build a spec from ``"M0"``, ``"M1"`` or ``"LFijk"``."""
        kw = {} if maturities is None else {"maturities": tuple(maturities)}
        name = name.upper()
        if name in _RESTRICTIONS:
            return cls(R=R, latent_mask=(False,) * R, restriction=name, **kw)
        if name.startswith("LF") and len(name) == 2 + R and set(name[2:]) <= {"0", "1"}:
            mask = tuple(c == "1" for c in name[2:])
            return cls(R=R, latent_mask=mask, restriction="M1", **kw)
        raise ValueError(f"unrecognised model name {name!r}")

    def without_latent(self) -> "ModelSpec":
        return ModelSpec(self.R, (False,) * self.R, self.maturities, self.restriction)


@dataclass
class QParams:
    """Risk-neutral parameters; fields may carry leading batch dimensions."""

    k_inf_q: np.ndarray
    g_q: np.ndarray
    sigma_p: np.ndarray
    sigma_e2: np.ndarray = field(default_factory=lambda: np.asarray(0.0))

    def __post_init__(self):
        self.k_inf_q = np.asarray(self.k_inf_q, dtype=float)
        self.g_q = np.asarray(self.g_q, dtype=float)
        self.sigma_p = np.asarray(self.sigma_p, dtype=float)
        self.sigma_e2 = np.asarray(self.sigma_e2, dtype=float)

    @property
    def R(self) -> int:
        return self.g_q.shape[-1]

    def validate(self) -> None:
        if np.any(np.diff(self.g_q, axis=-1) >= 0):
            raise PricingError("g_q must be strictly decreasing (real and distinct eigenvalues)")
        diag = np.diagonal(self.sigma_p, axis1=-2, axis2=-1)
        if np.any(diag <= 0):
            raise PricingError("diagonal of sigma_p must be strictly positive")
        if np.any(np.triu(self.sigma_p, 1) != 0):
            raise PricingError("sigma_p must be lower triangular")
        if np.any(self.sigma_e2 < 0):
            raise PricingError("sigma_e2 must be non-negative")


@dataclass
class LoadingsX:
    a_x: np.ndarray  # (..., J) yield intercepts
    b_x: np.ndarray  # (..., J, R) yield slopes
    a_n: np.ndarray  # (..., J) log-price intercepts
    b_n: np.ndarray  # (..., J, R) log-price slopes
    maturities: tuple[int, ...]


@dataclass
class PCWeights:
    w: np.ndarray  # (R, J)
    w_perp: np.ndarray  # (J - R, J)
    maturities: tuple[int, ...]

    @classmethod
    def from_matrix(cls, w, maturities) -> "PCWeights":
        w = np.atleast_2d(np.asarray(w, dtype=float))
        return cls(w=w, w_perp=null_space_basis(w), maturities=tuple(int(m) for m in maturities))

    @property
    def R(self) -> int:
        return self.w.shape[0]


@dataclass
class LoadingsP:
    a_p: np.ndarray  # (..., J)
    b_p: np.ndarray  # (..., J, R)
    maturities: tuple[int, ...]

    def price_loadings(self) -> tuple[np.ndarray, np.ndarray]:
        """Log-price loadings ``(-n A_n, -n B_n)`` in factor coordinates."""
        n = np.asarray(self.maturities, dtype=float)
        return -n * self.a_p, -n[:, None] * self.b_p


@dataclass
class Rotation:
    """Map between JSZ states X and principal components P = c + U X."""

    u: np.ndarray  # (..., R, R) = W B_X
    u_inv: np.ndarray
    c: np.ndarray  # (..., R) = W A_X
    cov_x: np.ndarray  # (..., R, R)
    lx: LoadingsX  # loadings at the weight maturities
    valid: np.ndarray  # (...,) bool


def null_space_basis(w: np.ndarray) -> np.ndarray:
    """Orthonormal rows spanning the null space of ``w``."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    R, J = w.shape
    if np.linalg.matrix_rank(w) < R:
        raise ValueError("w must have full row rank")
    basis = null_space(w).T
    if basis.shape != (J - R, J):
        raise ValueError("w must have full row rank")
    return basis


def _check_maturities(maturities) -> np.ndarray:
    mats = np.asarray(maturities, dtype=int).ravel()
    if mats.size == 0:
        raise PricingError("maturities must be non-empty")
    if mats.min() < 1 or mats.max() > MAX_MATURITY:
        raise PricingError(f"maturities must lie in [1, {MAX_MATURITY}] months")
    return mats


def _b_recursion(g: np.ndarray, n_max: int) -> np.ndarray:
    """Price slopes B_1..B_{n_max}, shape (..., n_max, R).

    B_{n+1} = diag(g) B_n - 1 with B_1 = -1, i.e. B_n = -sum_{k<n} g^k.
    """
    powers = g[..., None, :] ** np.arange(n_max)[:, None]
    with np.errstate(over="ignore", invalid="ignore"):
        return -np.cumsum(powers, axis=-2)


def _a_recursion(b: np.ndarray, k_inf: np.ndarray, cov_x: np.ndarray) -> np.ndarray:
    """Price intercepts A_1..A_{n_max} given slopes B_1..B_{n_max}.

    A_{n+1} = A_n + B_n' mu_Q + 0.5 B_n' Omega B_n with A_1 = 0 (delta_0 = 0)
    and mu_Q = (k_inf, 0, ..., 0).
    """
    drift = b[..., 0] * k_inf[..., None]
    convex = 0.5 * np.einsum("...ni,...ij,...nj->...n", b, cov_x, b)
    step = drift + convex
    a = np.zeros_like(step)
    a[..., 1:] = np.cumsum(step[..., :-1], axis=-1)
    return a


def _x_loadings_raw(k_inf, g, cov_x, maturities) -> tuple[LoadingsX, np.ndarray]:
    mats = _check_maturities(maturities)
    b_all = _b_recursion(g, int(mats.max()))
    a_all = _a_recursion(b_all, k_inf, cov_x)
    b_n = b_all[..., mats - 1, :]
    a_n = a_all[..., mats - 1]
    n = mats.astype(float)
    lx = LoadingsX(a_x=-a_n / n, b_x=-b_n / n[:, None], a_n=a_n, b_n=b_n,
                   maturities=tuple(int(m) for m in mats))
    ok = np.all(np.isfinite(b_n) & (np.abs(b_n) < LOADING_CAP), axis=(-2, -1))
    ok &= np.all(np.isfinite(a_n), axis=-1)
    return lx, ok


def compute_x_loadings(q: QParams, maturities, cov_x=None) -> LoadingsX:
    """Yield loadings on the JSZ state vector X.

    ``cov_x`` is the covariance of X innovations; by default the covariance
    implied by ``q.sigma_p`` is used as if it were already in X coordinates.
    Use :func:`pc_loadings` when ``sigma_p`` refers to principal components.
    """
    q.validate()
    if cov_x is None:
        cov_x = q.sigma_p @ np.swapaxes(q.sigma_p, -1, -2)
    lx, ok = _x_loadings_raw(q.k_inf_q, q.g_q, np.asarray(cov_x, float), maturities)
    if not np.all(ok):
        raise PricingError("loading recursion overflowed; |g_q| too large for the requested maturities")
    return lx


def rotation(q: QParams, w: PCWeights) -> Rotation:
    """Batch-friendly rotation; invalid entries are flagged, not raised."""
    mats = np.asarray(w.maturities)
    g = q.g_q
    b_all = _b_recursion(g, int(mats.max()))
    b_x = -b_all[..., mats - 1, :] / mats[:, None]
    u = np.einsum("rj,...jk->...rk", w.w, b_x)
    distinct = np.all(np.diff(g, axis=-1) < 0, axis=-1)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(np.where(np.isfinite(u), u, 0.0))
    valid = distinct & np.isfinite(cond) & (cond < COND_CAP)
    u_safe = np.where(valid[..., None, None], u, np.eye(w.R))
    u_inv = np.linalg.inv(u_safe)
    cov_p = q.sigma_p @ np.swapaxes(q.sigma_p, -1, -2)
    cov_x = u_inv @ cov_p @ np.swapaxes(u_inv, -1, -2)
    lx, ok = _x_loadings_raw(q.k_inf_q, g, cov_x, mats)
    valid = valid & ok
    c = np.einsum("rj,...j->...r", w.w, lx.a_x)
    return Rotation(u=u, u_inv=u_inv, c=c, cov_x=cov_x, lx=lx, valid=valid)


def _refine(b_p: np.ndarray, a_p: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One correction step so that W B_P = I and W A_P = 0 hold to rounding.

    With M = W B_P close to I, B_P + B_P (I - M) has residual (I - M)^2; A_P is
    then projected off the PC directions.  This matters when W B_X is poorly
    conditioned.
    """
    R = w.shape[0]
    m = np.einsum("rj,...jk->...rk", w, b_p)
    b_p = b_p + b_p @ (np.eye(R) - m)
    a_p = a_p - np.einsum("...jr,...r->...j", b_p, np.einsum("rj,...j->...r", w, a_p))
    return b_p, a_p


def rotate_to_pc(lx: LoadingsX, w: PCWeights) -> LoadingsP:
    """Express yield loadings in principal-component coordinates.

    A_P = A_X - B_X (W B_X)^{-1} W A_X and B_P = B_X (W B_X)^{-1}.
    ``lx`` must be evaluated at the maturities ``w`` was built on.
    """
    if tuple(lx.maturities) != tuple(w.maturities):
        raise PricingError("loadings and weights refer to different maturities")
    u = np.einsum("rj,...jk->...rk", w.w, lx.b_x)
    cond = np.linalg.cond(u)
    if np.any(~np.isfinite(cond) | (cond >= COND_CAP)):
        raise PricingError("W B_X is singular (a knife-edge case where P does not span X)")
    u_inv = np.linalg.inv(u)
    b_p = lx.b_x @ u_inv
    wa = np.einsum("rj,...j->...r", w.w, lx.a_x)
    a_p = lx.a_x - np.einsum("...jr,...r->...j", b_p, wa)
    b_p, a_p = _refine(b_p, a_p, w.w)
    return LoadingsP(a_p=a_p, b_p=b_p, maturities=lx.maturities)


def pc_loadings(q: QParams, w: PCWeights, maturities=None, strict: bool = True) -> tuple[LoadingsP, np.ndarray]:
    """Loadings of yields on the PCs for ``maturities`` (default: those of ``w``).

    Returns the loadings and a boolean validity mask over the batch; with
    ``strict`` any invalid entry raises instead.
    """
    rot = rotation(q, w)
    if maturities is None or tuple(int(m) for m in maturities) == tuple(w.maturities):
        lx = rot.lx
    else:
        lx, ok = _x_loadings_raw(q.k_inf_q, q.g_q, rot.cov_x, maturities)
        rot.valid = rot.valid & ok
    if strict and not np.all(rot.valid):
        raise PricingError("invalid Q parameters: non-distinct eigenvalues, singular W B_X or overflow")
    b_p = lx.b_x @ rot.u_inv
    a_p = lx.a_x - np.einsum("...jr,...r->...j", b_p, rot.c)
    if lx is rot.lx:
        b_p, a_p = _refine(b_p, a_p, w.w)
    return LoadingsP(a_p=a_p, b_p=b_p, maturities=lx.maturities), rot.valid


def q_dynamics(q: QParams, w: PCWeights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Risk-neutral drift and feedback of P, plus a validity mask.

    P_t = mu_P^Q + Phi_P^Q P_{t-1} + Sigma_P eps with Phi_P^Q = U diag(g) U^{-1}
    and mu_P^Q = c + U mu^Q - Phi_P^Q c.
    """
    rot = rotation(q, w)
    phi = rot.u @ (q.g_q[..., :, None] * rot.u_inv)
    mu_x = np.zeros(q.g_q.shape)
    mu_x[..., 0] = q.k_inf_q
    mu = rot.c + np.einsum("...ij,...j->...i", rot.u, mu_x) - np.einsum("...ij,...j->...i", phi, rot.c)
    return mu, phi, rot.valid


def measurement_residuals(y: np.ndarray, p: np.ndarray, lp: LoadingsP, w: PCWeights) -> np.ndarray:
    """Projected pricing errors W_perp (y - A_P - B_P p), shape (..., J - R)."""
    e = y - lp.a_p - np.einsum("...jr,...r->...j", lp.b_p, p)
    return np.einsum("kj,...j->...k", w.w_perp, e)


def q_log_density(y_t, p_t, lp: LoadingsP, w: PCWeights, sigma_e2) -> np.ndarray:
    """Cross-sectional log density log N(W_perp e_t; 0, sigma_e2 I)."""
    sigma_e2 = np.asarray(sigma_e2, dtype=float)
    if np.any(sigma_e2 <= 0):
        raise ValueError("sigma_e2 must be positive")
    y_t = np.asarray(y_t, dtype=float)
    p_t = np.asarray(p_t, dtype=float)
    if y_t.shape[-1] != w.w.shape[1] or p_t.shape[-1] != w.R:
        raise ValueError("dimension mismatch between data and weights")
    r = measurement_residuals(y_t, p_t, lp, w)
    k = r.shape[-1]
    return -0.5 * k * np.log(2 * np.pi * sigma_e2) - 0.5 * np.sum(r * r, axis=-1) / sigma_e2


def reference_weights(q: QParams, maturities, R: int | None = None) -> PCWeights:
    """Level/slope/curvature-like weights from the loadings themselves.

    Top-R eigenvectors of B_X B_X', sign-normalized to positive row sums.
    Used to simulate panels when no training sample exists yet.
    """
    R = q.R if R is None else R
    lx, ok = _x_loadings_raw(q.k_inf_q, q.g_q, np.eye(q.R), maturities)
    if not np.all(ok):
        raise PricingError("overflow in reference loadings")
    vals, vecs = np.linalg.eigh(lx.b_x @ lx.b_x.T)
    w = vecs[:, np.argsort(vals)[::-1][:R]].T
    w = w * np.where(w.sum(axis=1) < 0, -1.0, 1.0)[:, None]
    return PCWeights.from_matrix(w, lx.maturities)


def pc_system(q: QParams, w: PCWeights, maturities=None):
    """Loadings and Q dynamics of P from a single rotation.

    Returns ``(LoadingsP, mu_P^Q, Phi_P^Q, valid)``; invalid batch entries
    carry finite placeholder values and must be masked by the caller.
    """
    rot = rotation(q, w)
    if maturities is None or tuple(int(m) for m in maturities) == tuple(w.maturities):
        lx = rot.lx
    else:
        lx, ok = _x_loadings_raw(q.k_inf_q, q.g_q, rot.cov_x, maturities)
        rot.valid = rot.valid & ok
    b_p = lx.b_x @ rot.u_inv
    a_p = lx.a_x - np.einsum("...jr,...r->...j", b_p, rot.c)
    if lx is rot.lx:
        b_p, a_p = _refine(b_p, a_p, w.w)
    phi = rot.u @ (q.g_q[..., :, None] * rot.u_inv)
    mu_x = np.zeros(q.g_q.shape)
    mu_x[..., 0] = q.k_inf_q
    mu = rot.c + np.einsum("...ij,...j->...i", rot.u, mu_x) - np.einsum("...ij,...j->...i", phi, rot.c)
    valid = rot.valid & np.all(np.isfinite(a_p), axis=-1) & np.all(np.isfinite(b_p), axis=(-2, -1))
    return LoadingsP(a_p=a_p, b_p=b_p, maturities=lx.maturities), mu, phi, valid
