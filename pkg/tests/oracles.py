"""Reference computations used by the tests.

Everything here is written from the model definitions with scalar loops,
dense linear algebra or quadrature, independently of the package code.
"""

import math

import numpy as np
from scipy import stats
from scipy.special import logsumexp


def dense_central_hessian(grad_fn, theta, h=1e-5):
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h * max(1.0, abs(theta[j]))
        H[:, j] = (grad_fn(theta + e) - grad_fn(theta - e)) / (2 * e[j])
    return 0.5 * (H + H.T)


def central_gradient(f, theta, h=1e-5):
    theta = np.asarray(theta, dtype=float)
    g = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


# -- model A --------------------------------------------------------------


def model_a_log_density_scalar(y, theta):
    """y (N, T); theta = (theta_1..theta_N, mu, log tau, log sigma)."""
    N, T = y.shape
    mu, log_tau, log_sigma = theta[N:]
    tau, sigma = math.exp(log_tau), math.exp(log_sigma)
    total = log_tau  # flat prior on tau, seen from log tau
    for i in range(N):
        total += stats.norm.logpdf(theta[i], mu, tau)
        for t in range(T):
            total += stats.norm.logpdf(y[i, t], theta[i], sigma)
    return total


def model_a_collapsed_moments(y, n_grid=400):
    """Posterior means of (mu, tau^2, sigma^2) from the collapsed posterior.

    With the unit means integrated out, ybar_i ~ N(mu, tau^2 + sigma^2/T)
    independently and the within-unit sum of squares carries
    sigma^{-N(T-1)} exp(-SS / 2 sigma^2).  mu is then integrated in closed
    form (its posterior mean is the grand mean) and (log tau, log sigma) on a
    grid.  Priors: flat on mu, tau and log sigma.
    """
    N, T = y.shape
    ybar = y.mean(axis=1)
    ss = float(((y - ybar[:, None]) ** 2).sum())
    grand = ybar.mean()
    between = float(((ybar - grand) ** 2).sum())

    def log_post(lt, ls):
        tau2, sig2 = np.exp(2 * lt), np.exp(2 * ls)
        v = tau2 + sig2 / T
        out = -0.5 * (N - 1) * np.log(v) - between / (2 * v)
        out += -0.5 * N * (T - 1) * np.log(sig2) - ss / (2 * sig2)
        return out + lt  # tau uniform -> Jacobian in log tau; log sigma uniform

    # locate the bulk with a coarse pass, then refine
    lt = np.linspace(-6, 4, 300)
    ls = np.linspace(-4, 4, 300)
    LT, LS = np.meshgrid(lt, ls, indexing="ij")
    lp = log_post(LT, LS)
    w = np.exp(lp - lp.max())
    keep = w > 1e-14
    lt = np.linspace(LT[keep].min() - 0.1, LT[keep].max() + 0.1, n_grid)
    ls = np.linspace(LS[keep].min() - 0.1, LS[keep].max() + 0.1, n_grid)
    LT, LS = np.meshgrid(lt, ls, indexing="ij")
    lp = log_post(LT, LS)
    w = np.exp(lp - logsumexp(lp))
    tau2, sig2 = np.exp(2 * LT), np.exp(2 * LS)
    m_tau2 = float((w * tau2).sum())
    m_sig2 = float((w * sig2).sum())
    sd_tau2 = math.sqrt(float((w * tau2**2).sum()) - m_tau2**2)
    sd_sig2 = math.sqrt(float((w * sig2**2).sum()) - m_sig2**2)
    # sd of mu: E[v / N] over the grid
    sd_mu = math.sqrt(float((w * (tau2 + sig2 / T)).sum()) / N)
    return {"mu": (grand, sd_mu), "tau2": (m_tau2, sd_tau2), "sigma2": (m_sig2, sd_sig2)}


def model_a_conditional_mode(y, mu, tau, sigma):
    T = y.shape[1]
    return (y.sum(axis=1) / sigma**2 + mu / tau**2) / (T / sigma**2 + 1 / tau**2)


# -- model B --------------------------------------------------------------


def model_b_log_density_scalar(model, theta):
    """Direct sum of the pieces of the hierarchical binomial logit."""
    k, N, T = model.unit_dim, model.n_units, model.T
    beta = theta[: N * k].reshape(N, k)
    pop = theta[N * k :]
    bbar = pop[:k]
    L = np.zeros((k, k))
    if model.diag_sigma:
        L[np.diag_indices(k)] = np.exp(pop[k:])
    else:
        r, c = np.tril_indices(k)
        L[r, c] = pop[k:]
        L[np.diag_indices(k)] = np.exp(np.diag(L))
    Sigma = L @ L.T
    total = 0.0
    for i in range(N):
        eta = beta[i] @ model.X[i]
        total += stats.binom.logpmf(model.y[i], T, 1 / (1 + math.exp(-eta)))
        total += stats.multivariate_normal.logpdf(beta[i], bbar, Sigma)
    total += stats.multivariate_normal.logpdf(bbar, np.zeros(k), 100.0 * np.eye(k))
    logd = np.log(np.diag(L))
    if model.diag_sigma:
        for j in range(k):
            var = Sigma[j, j]
            total += stats.invgamma.logpdf(var, a=(k + 2 - k + 1) / 2, scale=0.5)
            total += math.log(2.0) + 2 * logd[j]  # d var / d log sd
    else:
        total += stats.invwishart.logpdf(Sigma, df=k + 2, scale=np.eye(k))
        # Jacobian of L -> Sigma = L L' and of the log diagonal
        total += k * math.log(2.0) + sum((k - j) * logd[j] for j in range(k)) + logd.sum()
    return total


# -- model C --------------------------------------------------------------


def model_c_log_density_scalar(X, y, theta, beta_precision=0.2, a=2.0, b=1.0):
    """(beta, log sigma) with beta | s2 ~ N(0, s2 / beta_precision I), s2 ~ IG(a, b)."""
    q = X.shape[1]
    beta, log_sigma = theta[:q], theta[q]
    s2 = math.exp(2 * log_sigma)
    total = 0.0
    for i in range(X.shape[0]):
        mean = float(X[i] @ beta)
        for t in range(y.shape[1]):
            total += stats.norm.logpdf(y[i, t], mean, math.sqrt(s2))
    for j in range(q):
        total += stats.norm.logpdf(beta[j], 0.0, math.sqrt(s2 / beta_precision))
    total += stats.invgamma.logpdf(s2, a=a, scale=b)
    total += math.log(2.0) + 2 * log_sigma
    return total


def model_c_evidence_quadrature(x, y, beta_precision, a=2.0, b=1.0, n=1500):
    """Single-coefficient regression: trapezoid rule over (beta, log sigma^2).

    The integrand is smooth and decays fast in both directions, so the
    trapezoid rule on a wide uniform grid converges very quickly.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    beta = np.linspace(-25.0, 25.0, n)
    w = np.linspace(-12.0, 8.0, n)  # log sigma^2
    B, W = np.meshgrid(beta, w, indexing="ij")
    s2 = np.exp(W)
    resid = y[None, None, :] - B[..., None] * x[None, None, :]
    ll = -0.5 * y.size * np.log(2 * np.pi * s2) - 0.5 * (resid**2).sum(axis=-1) / s2
    lp = stats.norm.logpdf(B, 0.0, np.sqrt(s2 / beta_precision)) + stats.invgamma.logpdf(s2, a=a, scale=b)
    integrand = ll + lp + W  # d sigma^2 = sigma^2 d log sigma^2
    inner = logsumexp(integrand, axis=1) + np.log(w[1] - w[0])
    return float(logsumexp(inner) + np.log(beta[1] - beta[0]))


def normal_normal_log_evidence(y, prior_mean, prior_var, noise_var):
    """1-d: y_t = theta + e_t, so y ~ N(m 1, noise I + prior 1 1')."""
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    cov = noise_var * np.eye(n) + prior_var * np.ones((n, n))
    return float(stats.multivariate_normal.logpdf(y, np.full(n, prior_mean), cov))


# -- thresholds -----------------------------------------------------------


def threshold_cdf_oracle(v_values):
    """CDF of the density proportional to c(v) exp(-v), where on [v_(i), v_(i+1))
    c equals the number of draws strictly below v_(i), and c = that count on
    the tail beyond the largest draw."""
    v = np.sort(np.asarray(v_values, dtype=float))
    M = v.size
    counts = np.array([np.sum(v < v[i]) for i in range(M)], dtype=float)
    uppers = np.append(v[1:], np.inf)
    mass = counts * (np.exp(-v) - np.exp(-uppers))
    Z = mass.sum()

    def cdf(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for i in range(M):
            if counts[i] == 0:
                continue
            lo, hi = v[i], uppers[i]
            xi = np.clip(x, lo, hi)
            out += counts[i] * (np.exp(-lo) - np.exp(-xi))
        return out / Z

    return cdf


def gaussian_accept_prob(v_star, s, d=1):
    """P(-log Phi < v*) under the proposal N(0, s) for target N(0, 1), any d.

    With z standard normal, -log Phi = (s - 1)/2 |z|^2, so the event is a
    chi-square tail."""
    if s <= 1:
        raise ValueError("closed form assumes s > 1")
    return float(stats.chi2.cdf(2 * v_star / (s - 1), df=d))


def mvn_log_density(theta, mean, cov):
    return float(stats.multivariate_normal.logpdf(theta, mean, cov))

