"""Independent reference computations used by the tests.

Each oracle takes a different route to the quantity it checks: plain loops
instead of vectorised recursions, dense matrices instead of filters,
brute-force grids instead of line searches.
"""

import numpy as np


def random_stable_q(rng, R=3, scale=1.0):
    """Random lower-triangular Sigma, distinct ordered eigenvalues in (0.5, 0.999)."""
    g = np.sort(rng.uniform(0.5, 0.999, R))[::-1]
    while np.any(np.diff(g) > -1e-3):
        g = np.sort(rng.uniform(0.5, 0.999, R))[::-1]
    L = np.tril(rng.normal(0, 1e-4, (R, R)), -1) * scale
    L[np.diag_indices(R)] = rng.uniform(1e-4, 6e-4, R) * scale
    k_inf = rng.uniform(1e-6, 5e-5)
    return k_inf, g, L


def loop_loadings(k_inf, g, cov_x, n_max):
    """Price loadings A_n, B_n for n = 1..n_max by literal one-step recursion.

    A_{n+1} = A_n + B_n' mu + 0.5 B_n' Omega B_n,  B_{n+1} = Phi' B_n - delta_1.
    """
    R = len(g)
    mu = np.zeros(R)
    mu[0] = k_inf
    phi = np.diag(g)
    A = [0.0]
    B = [-np.ones(R)]
    for _ in range(n_max - 1):
        b = B[-1]
        A.append(A[-1] + b @ mu + 0.5 * b @ cov_x @ b)
        B.append(phi.T @ b - np.ones(R))
    return np.array(A), np.array(B)


def mc_yields(k_inf, g, cov_x, x0, maturities, n_paths, rng, chunk=200_000):
    """Monte Carlo zero-coupon yields under X_{t+1} = mu + diag(g) X_t + L eps.

    Returns (yields, standard errors) per maturity using the delta method on
    the price estimate.
    """
    R = len(g)
    mu = np.zeros(R)
    mu[0] = k_inf
    L = np.linalg.cholesky(cov_x)
    n_max = max(maturities)
    sums = np.zeros(len(maturities))
    sq = np.zeros(len(maturities))
    done = 0
    while done < n_paths:
        m = min(chunk, n_paths - done)
        x = np.broadcast_to(x0, (m, R)).copy()
        disc = np.zeros(m)
        prices = np.empty((m, len(maturities)))
        for n in range(1, n_max + 1):
            disc += x.sum(axis=1)
            for k, mat in enumerate(maturities):
                if mat == n:
                    prices[:, k] = np.exp(-disc)
            x = mu + x * g + rng.standard_normal((m, R)) @ L.T
        sums += prices.sum(axis=0)
        sq += (prices ** 2).sum(axis=0)
        done += m
    mean = sums / n_paths
    var = sq / n_paths - mean ** 2
    se_price = np.sqrt(var / n_paths)
    mats = np.asarray(maturities, float)
    return -np.log(mean) / mats, se_price / mean / mats


def normal_equations(y, X):
    """OLS coefficients with intercept from (X'X) b = X'y solved directly."""
    Xc = np.column_stack([np.ones(len(y)), X])
    return np.linalg.solve(Xc.T @ Xc, Xc.T @ y)


def grid_argmax_weight(draws, weights, gamma, lower, upper, n_grid=1_000_000):
    """Maximiser of the expected power utility of (1 - w) + w e^{rx} on a dense grid."""
    draws = np.asarray(draws, float)
    weights = np.asarray(weights, float) / np.sum(weights)
    m = np.exp(draws) - 1.0
    grid = np.linspace(lower, upper, n_grid)
    best_val, best_w = -np.inf, None
    for start in range(0, n_grid, 100_000):
        w = grid[start:start + 100_000]
        wealth = 1.0 + np.outer(w, m)
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.where(wealth > 0, wealth ** (1.0 - gamma) / (1.0 - gamma), -np.inf)
        val = u @ weights
        k = int(np.argmax(val))
        if val[k] > best_val:
            best_val, best_w = val[k], w[k]
    return best_w, grid[1] - grid[0]


def var1_loglik(p, mu, phi, cov):
    """Gaussian VAR(1) log-likelihood of P_{1:T} given P_0, term by term."""
    from scipy.stats import multivariate_normal

    return sum(multivariate_normal(mu + phi @ p[t - 1], cov).logpdf(p[t]) for t in range(1, len(p)))


def stacked_latent_loglik(p, mu, phi, sigma_p, phi_z, sigma_z, mask):
    """Log density of s_{1:T} built from an explicit linear map of the shocks.

    alpha_t = phi_z alpha_{t-1} + sigma_z eta_t with alpha_0 ~ N(0, sigma_z^2):
    stacking (alpha_0, eta_1..eta_T) as a standard normal vector xi, every
    alpha_t is a row block of M xi and s = S alpha + Sigma_P eps.  The
    covariance is assembled as M M' rather than through autocovariances.
    """
    from scipy.stats import multivariate_normal

    p = np.asarray(p, float)
    T, R = p.shape[0] - 1, p.shape[1]
    s = np.array([p[t] - mu - phi @ p[t - 1] for t in range(1, T + 1)])
    idx = np.flatnonzero(mask)
    d = idx.size
    M = np.zeros((T * d, (T + 1) * d))
    prev = np.zeros((d, (T + 1) * d))
    prev[:, :d] = np.diag(sigma_z)  # alpha_0
    for t in range(T):
        cur = np.diag(phi_z) @ prev
        cur[:, (t + 1) * d:(t + 2) * d] += np.diag(sigma_z)
        M[t * d:(t + 1) * d] = cur
        prev = cur
    S = np.zeros((T * R, T * d))
    for t in range(T):
        for j, k in enumerate(idx):
            S[t * R + k, t * d + j] = 1.0
    C = sigma_p @ sigma_p.T
    cov = S @ M @ M.T @ S.T + np.kron(np.eye(T), C)
    return float(multivariate_normal(np.zeros(T * R), cov).logpdf(s.ravel()))


def random_dynamics(rng, R=3, scale=1e-3):
    """Stable VAR(1) dynamics for PCs with a random lower-triangular Sigma_P."""
    A = rng.normal(0, 0.3, (R, R))
    rho = max(np.abs(np.linalg.eigvals(A)).max(), 1e-12)
    phi = A * rng.uniform(0.3, 0.95) / rho
    mu = rng.normal(0, scale, R)
    L = np.tril(rng.normal(0, scale / 3, (R, R)), -1)
    L[np.diag_indices(R)] = rng.uniform(0.3, 1.0, R) * scale
    return mu, phi, L


def yields_only_loglik(x, y, w, w_perp, maturities):
    """Profile log likelihood of the yields-only model with lambda_12 free.

    A direct implementation: loop recursions in X space, explicit rotation,
    per-period Gaussian densities.  ``x`` follows the package's unconstrained
    layout for R = 3, restriction M1 and no latent factor:
    [log k_inf, 2 atanh g1, log(g1 - g2), log(g2 - g3), log diag(L), 1e4 tril(L), lambda12].
    """
    from scipy.stats import multivariate_normal

    R = 3
    k_inf = np.exp(x[0])
    g1 = np.tanh(x[1] / 2)
    g = np.array([g1, g1 - np.exp(x[2]), g1 - np.exp(x[2]) - np.exp(x[3])])
    L = np.diag(np.exp(x[4:7]))
    L[1, 0], L[2, 0], L[2, 1] = x[7] / 1e4, x[8] / 1e4, x[9] / 1e4
    lam = x[10]
    mats = list(maturities)
    # B_n slopes at the weight maturities
    bx = np.array([[sum(gk ** j for j in range(n)) / n for gk in g] for n in mats])
    U = w @ bx
    Ui = np.linalg.inv(U)
    cov_p = L @ L.T
    cov_x = Ui @ cov_p @ Ui.T
    A, _ = loop_loadings(k_inf, g, cov_x, max(mats))
    ax = np.array([-A[n - 1] / n for n in mats])
    c = w @ ax
    bp = bx @ Ui
    ap = ax - bp @ c
    phi_q = U @ np.diag(g) @ Ui
    mu_q = c + U @ np.array([k_inf, 0.0, 0.0]) - phi_q @ c
    phi_p = phi_q.copy()
    phi_p[0, 1] += lam
    p = y @ w.T
    T = len(y) - 1
    ss = 0.0
    for t in range(1, T + 1):
        e = w_perp @ (y[t] - ap - bp @ p[t])
        ss += e @ e
    k = len(mats) - R
    s2 = ss / (T * k)
    ll_q = -0.5 * T * k * (np.log(2 * np.pi * s2) + 1.0)
    ll_p = sum(multivariate_normal(mu_q + phi_p @ p[t - 1], cov_p).logpdf(p[t]) for t in range(1, T + 1))
    return ll_q + ll_p
