"""Hierarchical models: unnormalized log posterior, analytic gradient, sparsity.

Parameter layout is fixed for every model: unit i occupies
``theta[i*k:(i+1)*k]`` and the population block is the final ``p`` entries.
Positive quantities enter on the log scale and covariance matrices through a
log-Cholesky factor; the Jacobians of those transforms are part of the prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import expit, gammaln

from .sparse_linalg import SparsityPattern, block_arrow_pattern

__all__ = [
    "HierarchicalModel",
    "OutOfSupport",
    "NormalMeanModel",
    "ModelA",
    "ModelB",
    "ModelC",
    "make_model_a",
    "make_model_b",
    "make_model_c",
    "make_normal_mean_model",
    "model_c_log_marglik",
    "MODEL_B_PRIOR",
]

LOG_2PI = np.log(2.0 * np.pi)


class OutOfSupport(FloatingPointError):
    """Gradient requested at a point where the log density is not finite."""


class HierarchicalModel:
    """Base class.  Subclasses implement the batched ``_log_terms``.

    ``_log_terms(thetas)`` takes a ``(m, dim)`` array and returns the data
    log-likelihood and the log prior (mixing distributions, hyperprior and
    transform Jacobians) as two ``(m,)`` arrays.
    """

    n_units: int = 0
    unit_dim: int = 0
    pop_dim: int = 0

    @property
    def dim(self) -> int:
        return self.n_units * self.unit_dim + self.pop_dim

    # -- density -----------------------------------------------------------

    def _check(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.dim:
            raise ValueError(f"theta has length {theta.shape[-1]}, model dimension is {self.dim}")
        return theta

    def _log_terms(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def log_density_many(self, thetas: np.ndarray) -> np.ndarray:
        """Log posterior kernel for each row of ``thetas``; -inf where undefined."""
        thetas = np.atleast_2d(self._check(thetas))
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            ll, lp = self._log_terms(thetas)
            out = ll + lp
        return np.where(np.isfinite(out), out, -np.inf)

    def log_density(self, theta: np.ndarray) -> float:
        theta = self._check(theta)
        if theta.ndim != 1:
            raise ValueError("log_density takes a single parameter vector")
        return float(self.log_density_many(theta[None, :])[0])

    def log_likelihood(self, theta: np.ndarray) -> float:
        theta = np.atleast_2d(self._check(theta))
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            ll, _ = self._log_terms(theta)
        return float(ll[0]) if np.isfinite(ll[0]) else -np.inf

    def log_likelihood_many(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(self._check(thetas))
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            ll, _ = self._log_terms(thetas)
        return np.where(np.isfinite(ll), ll, -np.inf)

    def log_prior(self, theta: np.ndarray) -> float:
        theta = np.atleast_2d(self._check(theta))
        _, lp = self._log_terms(theta)
        return float(lp[0])

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        theta = self._check(theta)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            g = self._gradient(theta)
        if not np.all(np.isfinite(g)) or not np.isfinite(self.log_density(theta)):
            raise OutOfSupport("log density is not finite at theta")
        return g

    def _gradient(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- decomposition into conditionally independent pieces ----------------

    def unit_log_density(self, theta: np.ndarray, i: int) -> float:
        """log f_i(y_i | beta_i, alpha) + log pi(beta_i | alpha) for unit i."""
        raise NotImplementedError

    def pop_log_density(self, theta: np.ndarray) -> float:
        """Hyperprior on the population block, including transform Jacobians."""
        raise NotImplementedError

    # -- structure ---------------------------------------------------------

    def sparsity(self) -> SparsityPattern:
        return block_arrow_pattern(self.n_units, self.unit_dim, self.pop_dim)

    def default_start(self) -> np.ndarray:
        return np.zeros(self.dim)

    def pop_names(self) -> list[str]:
        return [f"pop_{j}" for j in range(self.pop_dim)]

    def param_names(self) -> list[str]:
        units = [f"beta_{i}_{j}" for i in range(self.n_units) for j in range(self.unit_dim)]
        return units + list(self.pop_names())

    def split(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(units, pop) views with units shaped ``(..., N, k)``."""
        Nk = self.n_units * self.unit_dim
        units = theta[..., :Nk].reshape(theta.shape[:-1] + (self.n_units, self.unit_dim))
        return units, theta[..., Nk:]

    def config(self) -> dict:
        """Simulation settings that rebuild this model through its constructor."""
        return {}


# ---------------------------------------------------------------------------
# Conjugate normal mean (exact Gaussian posterior)
# ---------------------------------------------------------------------------


class NormalMeanModel(HierarchicalModel):
    """y_t ~ N(theta, noise_cov), theta ~ N(prior_mean, prior_cov).

    All parameters are population-level, so the pattern is dense.  The
    posterior is exactly Gaussian and the evidence is available in closed
    form, which makes this the reference target for sampler checks.
    """

    def __init__(self, y, prior_mean, prior_cov, noise_cov):
        self.y = np.atleast_2d(np.asarray(y, dtype=float))
        self.prior_mean = np.asarray(prior_mean, dtype=float)
        self.prior_cov = np.atleast_2d(np.asarray(prior_cov, dtype=float))
        self.noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=float))
        self.pop_dim = self.prior_mean.size
        self._prior_prec = np.linalg.inv(self.prior_cov)
        self._noise_prec = np.linalg.inv(self.noise_cov)
        self._prior_logdet = np.linalg.slogdet(self.prior_cov)[1]
        self._noise_logdet = np.linalg.slogdet(self.noise_cov)[1]
        n = self.y.shape[0]
        self.post_prec = self._prior_prec + n * self._noise_prec
        self.post_cov = np.linalg.inv(self.post_prec)
        self.post_mean = self.post_cov @ (
            self._prior_prec @ self.prior_mean + self._noise_prec @ self.y.sum(axis=0)
        )

    def _log_terms(self, thetas):
        d = self.pop_dim
        n = self.y.shape[0]
        resid = self.y[None, :, :] - thetas[:, None, :]
        quad = np.einsum("mti,ij,mtj->m", resid, self._noise_prec, resid)
        ll = -0.5 * (n * d * LOG_2PI + n * self._noise_logdet + quad)
        dev = thetas - self.prior_mean
        lp = -0.5 * (d * LOG_2PI + self._prior_logdet + np.einsum("mi,ij,mj->m", dev, self._prior_prec, dev))
        return ll, lp

    def _gradient(self, theta):
        return self._noise_prec @ (self.y - theta).sum(axis=0) - self._prior_prec @ (theta - self.prior_mean)

    def pop_log_density(self, theta):
        return self.log_density(theta)

    def sparsity(self):
        return SparsityPattern.from_dense_mask(np.ones((self.pop_dim, self.pop_dim), dtype=bool))

    def log_evidence(self) -> float:
        """Exact log marginal likelihood."""
        n, d = self.y.shape
        stacked_mean = np.tile(self.prior_mean, n)
        cov = np.kron(np.ones((n, n)), self.prior_cov) + np.kron(np.eye(n), self.noise_cov)
        dev = self.y.ravel() - stacked_mean
        sign, logdet = np.linalg.slogdet(cov)
        return float(-0.5 * (n * d * LOG_2PI + logdet + dev @ np.linalg.solve(cov, dev)))

    def pop_names(self):
        return [f"theta_{j}" for j in range(self.pop_dim)]


def make_normal_mean_model(dim=2, n_obs=5, seed=0, prior_scale=2.0, correlation=0.5):
    rng = np.random.default_rng(seed)
    prior_cov = prior_scale**2 * np.eye(dim)
    noise_cov = np.full((dim, dim), correlation) + (1.0 - correlation) * np.eye(dim)
    truth = rng.normal(0.0, 1.0, dim)
    y = rng.multivariate_normal(truth, noise_cov, size=n_obs)
    return NormalMeanModel(y, np.zeros(dim), prior_cov, noise_cov)


# ---------------------------------------------------------------------------
# Model A: normal-normal hierarchy
# ---------------------------------------------------------------------------


class ModelA(HierarchicalModel):
    """y_it ~ N(theta_i, sigma^2), theta_i ~ N(mu, tau^2).

    Population block is (mu, log tau, log sigma).  Flat priors on mu, tau and
    log sigma; the log-tau transform contributes log tau.
    """

    unit_dim = 1
    pop_dim = 3

    def __init__(self, y: np.ndarray, settings: dict | None = None):
        self.y = np.asarray(y, dtype=float)
        self.n_units, self.T = self.y.shape
        self.ybar = self.y.mean(axis=1)
        self.ss = ((self.y - self.ybar[:, None]) ** 2).sum(axis=1)
        self._settings = settings or {}

    def _log_terms(self, thetas):
        th, pop = self.split(thetas)
        th = th[..., 0]
        mu, log_tau, log_sigma = pop[:, 0:1], pop[:, 1:2], pop[:, 2:3]
        T = self.T
        inv_s2 = np.exp(-2.0 * log_sigma)
        inv_t2 = np.exp(-2.0 * log_tau)
        ll_units = -0.5 * T * LOG_2PI - T * log_sigma - 0.5 * inv_s2 * (self.ss + T * (self.ybar - th) ** 2)
        mix = -0.5 * LOG_2PI - log_tau - 0.5 * inv_t2 * (th - mu) ** 2
        ll = ll_units.sum(axis=1)
        lp = mix.sum(axis=1) + log_tau[:, 0]
        return ll, lp

    def _gradient(self, theta):
        N, T = self.n_units, self.T
        th = theta[:N]
        mu, log_tau, log_sigma = theta[N:]
        inv_s2 = np.exp(-2.0 * log_sigma)
        inv_t2 = np.exp(-2.0 * log_tau)
        r = self.ybar - th
        d = th - mu
        g = np.empty(N + 3)
        g[:N] = T * inv_s2 * r - inv_t2 * d
        g[N] = inv_t2 * d.sum()
        g[N + 1] = -N + inv_t2 * (d @ d) + 1.0
        g[N + 2] = -N * T + inv_s2 * (self.ss.sum() + T * (r @ r))
        return g

    def unit_log_density(self, theta, i):
        theta = self._check(theta)
        N, T = self.n_units, self.T
        mu, log_tau, log_sigma = theta[N:]
        sigma, tau = np.exp(log_sigma), np.exp(log_tau)
        ll = np.sum(-0.5 * LOG_2PI - log_sigma - 0.5 * ((self.y[i] - theta[i]) / sigma) ** 2)
        return float(ll - 0.5 * LOG_2PI - log_tau - 0.5 * ((theta[i] - mu) / tau) ** 2)

    def pop_log_density(self, theta):
        return float(self._check(theta)[self.n_units + 1])

    def conditional_mode(self, mu, tau, sigma) -> np.ndarray:
        """Mode (and mean) of each theta_i given the population parameters."""
        prec = self.T / sigma**2 + 1.0 / tau**2
        return (self.T * self.ybar / sigma**2 + mu / tau**2) / prec

    def pop_names(self):
        return ["mu", "log_tau", "log_sigma"]

    def config(self):
        return dict(self._settings)


def make_model_a(N, T, mu_true=-1.0, tau_true=3.0, sigma_true=2.0, seed=0) -> ModelA:
    if N < 1 or T < 1:
        raise ValueError("model A needs N >= 1 and T >= 1")
    if tau_true <= 0 or sigma_true <= 0:
        raise ValueError("tau_true and sigma_true must be positive")
    rng = np.random.default_rng(seed)
    theta = rng.normal(mu_true, tau_true, size=N)
    y = rng.normal(theta[:, None], sigma_true, size=(N, T))
    settings = dict(N=N, T=T, mu_true=mu_true, tau_true=tau_true, sigma_true=sigma_true, seed=seed)
    return ModelA(y, settings)


# ---------------------------------------------------------------------------
# Model B: hierarchical binomial logit
# ---------------------------------------------------------------------------

MODEL_B_PRIOR = {"mean_var": 100.0, "iw_dof_extra": 2.0, "iw_scale": 1.0}


def _tril_index(k):
    return np.tril_indices(k)


class ModelB(HierarchicalModel):
    """y_i ~ Binomial(T, p_i), logit p_i = beta_i' x_i, beta_i ~ MVN(beta_bar, Sigma).

    Population block: beta_bar (k) followed by the lower triangle of the
    Cholesky factor of Sigma in row-major order with log diagonal
    (k(k+1)/2 entries).  With ``diag_sigma`` only the k log standard
    deviations are kept.

    Priors: beta_bar ~ MVN(0, mean_var * I); Sigma ~ inverse Wishart with
    k + iw_dof_extra degrees of freedom and scale iw_scale * I.  In the
    diagonal variant each variance gets the matching inverse-gamma marginal,
    IG((dof - k + 1) / 2, iw_scale / 2).
    """

    def __init__(self, y, X, T, diag_sigma=False, prior=None, settings=None):
        self.y = np.asarray(y, dtype=float)
        self.X = np.asarray(X, dtype=float)
        self.T = int(T)
        self.n_units, self.unit_dim = self.X.shape
        k = self.unit_dim
        self.diag_sigma = bool(diag_sigma)
        self.n_chol = k if self.diag_sigma else k * (k + 1) // 2
        self.pop_dim = k + self.n_chol
        self.prior = dict(MODEL_B_PRIOR if prior is None else prior)
        self.nu = k + self.prior["iw_dof_extra"]
        self._log_binom = float(np.sum(gammaln(self.T + 1) - gammaln(self.y + 1) - gammaln(self.T - self.y + 1)))
        rows, cols = _tril_index(k)
        self._rows, self._cols = rows, cols
        self._diag_pos = np.flatnonzero(rows == cols)
        self._settings = settings or {}

    # L (m, k, k) from the Cholesky parameters (m, n_chol)
    def _chol(self, c):
        k = self.unit_dim
        m = c.shape[0]
        L = np.zeros((m, k, k))
        if self.diag_sigma:
            idx = np.arange(k)
            L[:, idx, idx] = np.exp(c)
            return L, c
        L[:, self._rows, self._cols] = c
        d = c[:, self._diag_pos]
        idx = np.arange(k)
        L[:, idx, idx] = np.exp(d)
        return L, d

    def _kernel_args(self):
        cached = self.__dict__.get("_kargs")
        if cached is None:
            cached = self._kargs = self._build_kernel_args()
        return cached

    def _build_kernel_args(self):
        pr = self.prior
        k = self.unit_dim
        if self.diag_sigma:
            shape = 0.5 * (self.nu - k + 1)
            scale = 0.5 * pr["iw_scale"]
            const = k * (shape * np.log(scale) - gammaln(shape) + np.log(2.0))
        else:
            nu, psi = self.nu, pr["iw_scale"]
            shape = scale = 0.0
            const = 0.5 * nu * k * np.log(psi) - 0.5 * nu * k * np.log(2.0) - _multigammaln(0.5 * nu, k) + k * np.log(2.0)
        const += -0.5 * k * np.log(2 * np.pi * pr["mean_var"]) - 0.5 * self.n_units * k * LOG_2PI
        return (self.X, self.y, float(self.T), self._rows, self._cols, self.diag_sigma,
                float(pr["mean_var"]), float(pr["iw_scale"]), float(self.nu), shape, scale, float(const))

    def _log_terms(self, thetas):
        ll, lp = _b_log_terms(np.ascontiguousarray(thetas, dtype=float), *self._kernel_args())
        return ll + self._log_binom, lp

    def _gradient(self, theta):
        return _b_gradient(np.ascontiguousarray(theta, dtype=float), *self._kernel_args())

    def _log_terms_reference(self, thetas):
        k = self.unit_dim
        beta, pop = self.split(thetas)
        beta_bar, c = pop[:, :k], pop[:, k:]
        m = thetas.shape[0]
        eta = np.einsum("mnk,nk->mn", beta, self.X)
        # log(1 + e^eta) computed stably
        softplus = np.logaddexp(0.0, eta)
        ll = (self.y * eta - self.T * softplus).sum(axis=1) + self._log_binom

        L, d = self._chol(c)
        Linv = np.linalg.inv(L)
        dev = beta - beta_bar[:, None, :]
        w = np.einsum("mij,mnj->mni", Linv, dev)
        mix = (
            -0.5 * self.n_units * k * LOG_2PI
            - self.n_units * d.sum(axis=1)
            - 0.5 * np.einsum("mni,mni->m", w, w)
        )
        return ll, mix + self._hyper(beta_bar, d, Linv)

    def _hyper(self, beta_bar, d, Linv):
        """Hyperprior on (beta_bar, Sigma) plus the log-Cholesky Jacobian, batched."""
        k = self.unit_dim
        mean_var = self.prior["mean_var"]
        hyper_mean = (
            -0.5 * k * np.log(2 * np.pi * mean_var)
            - 0.5 * np.einsum("mk,mk->m", beta_bar, beta_bar) / mean_var
        )
        psi = self.prior["iw_scale"]
        if self.diag_sigma:
            shape = 0.5 * (self.nu - k + 1)
            scale = 0.5 * psi
            hyper_cov = np.sum(
                shape * np.log(scale) - gammaln(shape) - (shape + 1) * 2.0 * d - scale * np.exp(-2.0 * d),
                axis=1,
            )
            jac = np.sum(np.log(2.0) + 2.0 * d, axis=1)
        else:
            nu = self.nu
            log_norm = 0.5 * nu * k * np.log(psi) - 0.5 * nu * k * np.log(2.0) - _multigammaln(0.5 * nu, k)
            trace = psi * np.einsum("mij,mij->m", Linv, Linv)
            hyper_cov = log_norm - (nu + k + 1) * d.sum(axis=1) - 0.5 * trace
            expo = k - np.arange(k) + 1  # k - j + 2 for 1-based j
            jac = k * np.log(2.0) + d @ expo
        return hyper_mean + hyper_cov + jac

    def _gradient_reference(self, theta):
        k, N = self.unit_dim, self.n_units
        beta, pop = self.split(theta)
        beta_bar, c = pop[:k], pop[k:]
        eta = np.einsum("nk,nk->n", beta, self.X)
        p = expit(eta)
        g_beta_like = (self.y - self.T * p)[:, None] * self.X

        L, d = self._chol(c[None, :])
        L, d = L[0], d[0]
        Linv = np.linalg.inv(L)
        prec = Linv.T @ Linv
        dev = beta - beta_bar
        pd = dev @ prec  # rows Sigma^{-1}(beta_i - beta_bar)
        g_beta = g_beta_like - pd
        g_bar = pd.sum(axis=0) - beta_bar / self.prior["mean_var"]

        S = dev.T @ dev
        psi = self.prior["iw_scale"]
        if self.diag_sigma:
            var = np.exp(2.0 * d)
            shape = 0.5 * (self.nu - k + 1)
            scale = 0.5 * psi
            g_c = -N + np.diag(S) / var - 2.0 * (shape + 1) + 2.0 * scale / var + 2.0
        else:
            # gradient wrt L of -1/2 tr(Sigma^{-1} (S + psi I))
            G = prec @ (S + psi * np.eye(k)) @ prec @ L
            g_c = G[self._rows, self._cols].copy()
            expo = k - np.arange(k) + 1
            diag_scalar = -N - (self.nu + k + 1) + expo
            g_c[self._diag_pos] = g_c[self._diag_pos] * np.exp(d) + diag_scalar
        out = np.concatenate([g_beta.ravel(), g_bar, g_c])
        return out

    def unit_log_density(self, theta, i):
        theta = self._check(theta)
        k = self.unit_dim
        beta, pop = self.split(theta)
        L, d = self._chol(pop[None, k:])
        L, d = L[0], d[0]
        eta = beta[i] @ self.X[i]
        ll = (
            self.y[i] * eta
            - self.T * np.logaddexp(0.0, eta)
            + gammaln(self.T + 1)
            - gammaln(self.y[i] + 1)
            - gammaln(self.T - self.y[i] + 1)
        )
        w = np.linalg.solve(L, beta[i] - pop[:k])
        return float(ll - 0.5 * k * LOG_2PI - d.sum() - 0.5 * w @ w)

    def pop_log_density(self, theta):
        theta = self._check(theta)
        k = self.unit_dim
        _, pop = self.split(theta)
        L, d = self._chol(pop[None, k:])
        return float(self._hyper(pop[None, :k], d, np.linalg.inv(L))[0])

    def sigma(self, theta) -> np.ndarray:
        _, pop = self.split(np.asarray(theta, dtype=float))
        L, _ = self._chol(pop[None, self.unit_dim :])
        return L[0] @ L[0].T

    def pop_names(self):
        k = self.unit_dim
        names = [f"beta_bar_{j}" for j in range(k)]
        if self.diag_sigma:
            names += [f"log_sd_{j}" for j in range(k)]
        else:
            for r, c in zip(self._rows, self._cols):
                names.append(f"log_chol_{r}{c}" if r == c else f"chol_{r}{c}")
        return names

    def config(self):
        return dict(self._settings)


@numba.njit(cache=True)
def _b_pop_setup(c, k, rows, cols, diag):
    # L, its inverse, and the log diagonal from the Cholesky parameters
    L = np.zeros((k, k))
    d = np.empty(k)
    if diag:
        for j in range(k):
            d[j] = c[j]
            L[j, j] = np.exp(c[j])
    else:
        for t in range(rows.size):
            r, q = rows[t], cols[t]
            if r == q:
                d[r] = c[t]
                L[r, r] = np.exp(c[t])
            else:
                L[r, q] = c[t]
    Linv = np.zeros((k, k))
    for j in range(k):
        Linv[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, k):
            acc = 0.0
            for t in range(j, i):
                acc += L[i, t] * Linv[t, j]
            Linv[i, j] = -acc / L[i, i]
    return L, Linv, d


@numba.njit(cache=True)
def _softplus(x):
    if x > 0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@numba.njit(cache=True)
def _b_log_terms(thetas, X, y, T, rows, cols, diag, mean_var, psi, nu, shape, scale, const):
    m = thetas.shape[0]
    N, k = X.shape
    off = N * k
    ll = np.empty(m)
    lp = np.empty(m)
    w = np.empty(k)
    dev = np.empty(k)
    for s in range(m):
        th = thetas[s]
        bbar = th[off : off + k]
        L, Linv, d = _b_pop_setup(th[off + k :], k, rows, cols, diag)
        a = 0.0
        quad = 0.0
        for i in range(N):
            eta = 0.0
            for j in range(k):
                eta += th[i * k + j] * X[i, j]
                dev[j] = th[i * k + j] - bbar[j]
            a += y[i] * eta - T * _softplus(eta)
            for r in range(k):
                acc = 0.0
                for q in range(r + 1):
                    acc += Linv[r, q] * dev[q]
                w[r] = acc
                quad += acc * acc
        dsum = 0.0
        for j in range(k):
            dsum += d[j]
        bb = 0.0
        for j in range(k):
            bb += bbar[j] * bbar[j]
        p = const - N * dsum - 0.5 * quad - 0.5 * bb / mean_var
        if diag:
            for j in range(k):
                p += -(shape + 1) * 2.0 * d[j] - scale * np.exp(-2.0 * d[j]) + 2.0 * d[j]
        else:
            tr = 0.0
            for r in range(k):
                for q in range(r + 1):
                    tr += Linv[r, q] * Linv[r, q]
            p += -(nu + k + 1) * dsum - 0.5 * psi * tr
            for j in range(k):
                p += (k - j + 1) * d[j]
        ll[s] = a
        lp[s] = p
    return ll, lp


@numba.njit(cache=True)
def _b_gradient(th, X, y, T, rows, cols, diag, mean_var, psi, nu, shape, scale, const):
    N, k = X.shape
    off = N * k
    out = np.zeros(th.size)
    bbar = th[off : off + k]
    L, Linv, d = _b_pop_setup(th[off + k :], k, rows, cols, diag)
    prec = Linv.T @ Linv
    S = np.zeros((k, k))
    dev = np.empty(k)
    g_bar = np.zeros(k)
    for i in range(N):
        eta = 0.0
        for j in range(k):
            eta += th[i * k + j] * X[i, j]
            dev[j] = th[i * k + j] - bbar[j]
        if eta >= 0:
            p = 1.0 / (1.0 + np.exp(-eta))
        else:
            e = np.exp(eta)
            p = e / (1.0 + e)
        resid = y[i] - T * p
        for r in range(k):
            acc = 0.0
            for q in range(k):
                acc += prec[r, q] * dev[q]
            out[i * k + r] = resid * X[i, r] - acc
            g_bar[r] += acc
            for q in range(k):
                S[r, q] += dev[r] * dev[q]
    for r in range(k):
        out[off + r] = g_bar[r] - bbar[r] / mean_var
    base = off + k
    if diag:
        for j in range(k):
            var = np.exp(2.0 * d[j])
            out[base + j] = -N + S[j, j] / var - 2.0 * (shape + 1) + 2.0 * scale / var + 2.0
    else:
        for j in range(k):
            S[j, j] += psi
        G = prec @ S @ prec @ L
        for t in range(rows.size):
            r, q = rows[t], cols[t]
            if r == q:
                out[base + t] = G[r, r] * np.exp(d[r]) - N - (nu + k + 1) + (k - r + 1)
            else:
                out[base + t] = G[r, q]
    return out


def _multigammaln(a, k):
    return 0.25 * k * (k - 1) * np.log(np.pi) + np.sum(gammaln(a - 0.5 * np.arange(k)))


def make_model_b(N, T=52, k=3, beta_bar_true=None, Sigma_true=None, seed=0, diag_sigma=False, prior=None) -> ModelB:
    if N < 1 or T < 1 or k < 1:
        raise ValueError("model B needs N, T, k >= 1")
    if beta_bar_true is None:
        beta_bar_true = np.linspace(-10.0, 10.0, k) if k > 1 else np.zeros(1)
    beta_bar_true = np.asarray(beta_bar_true, dtype=float)
    if Sigma_true is None:
        Sigma_true = 0.1 * np.eye(k)
    Sigma_true = np.asarray(Sigma_true, dtype=float)
    if beta_bar_true.shape != (k,) or Sigma_true.shape != (k, k):
        raise ValueError("beta_bar_true must have length k and Sigma_true shape (k, k)")
    if not np.allclose(Sigma_true, Sigma_true.T):
        raise ValueError("Sigma_true must be symmetric")
    try:
        chol = np.linalg.cholesky(Sigma_true)
    except np.linalg.LinAlgError:
        raise ValueError("Sigma_true must be positive definite") from None
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(N), rng.standard_normal((N, k - 1))])
    beta = beta_bar_true + rng.standard_normal((N, k)) @ chol.T
    p = expit(np.einsum("nk,nk->n", beta, X))
    y = rng.binomial(T, p).astype(float)
    settings = dict(
        N=N, T=T, k=k, beta_bar_true=beta_bar_true.tolist(), Sigma_true=Sigma_true.tolist(),
        seed=seed, diag_sigma=diag_sigma,
    )
    return ModelB(y, X, T, diag_sigma=diag_sigma, prior=prior, settings=settings)


# ---------------------------------------------------------------------------
# Model C: conjugate linear regression
# ---------------------------------------------------------------------------


@dataclass
class ModelCPrior:
    """beta | sigma^2 ~ N(0, sigma^2 / beta_precision * I), sigma^2 ~ IG(shape, scale)."""

    beta_precision: float = 0.2
    ig_shape: float = 2.0
    ig_scale: float = 1.0


class ModelC(HierarchicalModel):
    """y_it ~ N(x_i' beta, sigma^2) with a normal-inverse-gamma prior.

    Parameters are (beta, log sigma); everything is population-level so the
    Hessian is dense.
    """

    n_units = 0
    unit_dim = 0

    def __init__(self, X, y, prior: ModelCPrior | None = None, settings=None):
        # X: (n, q) unit covariates; y: (n, T) observations
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.n, self.q = self.X.shape
        self.T = self.y.shape[1]
        self.pop_dim = self.q + 1
        self.prior = prior or ModelCPrior()
        self.n_obs = self.n * self.T
        # sufficient statistics with each row of X repeated T times
        self.XtX = self.T * self.X.T @ self.X
        self.Xty = self.X.T @ self.y.sum(axis=1)
        self.yty = float(np.sum(self.y**2))
        self._settings = settings or {}

    def _log_terms(self, thetas):
        beta, w = thetas[:, : self.q], thetas[:, self.q]
        pr = self.prior
        q, n = self.q, self.n_obs
        rss = self.yty - 2.0 * beta @ self.Xty + np.einsum("mi,ij,mj->m", beta, self.XtX, beta)
        inv_s2 = np.exp(-2.0 * w)
        ll = -0.5 * n * LOG_2PI - n * w - 0.5 * inv_s2 * rss
        prior_beta = (
            -0.5 * q * LOG_2PI
            + 0.5 * q * np.log(pr.beta_precision)
            - q * w
            - 0.5 * pr.beta_precision * inv_s2 * np.einsum("mi,mi->m", beta, beta)
        )
        a, b = pr.ig_shape, pr.ig_scale
        prior_s2 = a * np.log(b) - gammaln(a) - (a + 1) * 2.0 * w - b * inv_s2
        jac = np.log(2.0) + 2.0 * w
        return ll, prior_beta + prior_s2 + jac

    def _gradient(self, theta):
        beta, w = theta[: self.q], theta[self.q]
        pr = self.prior
        inv_s2 = np.exp(-2.0 * w)
        resid_grad = self.Xty - self.XtX @ beta
        rss = self.yty - 2.0 * beta @ self.Xty + beta @ self.XtX @ beta
        g_beta = inv_s2 * (resid_grad - pr.beta_precision * beta)
        a, b = pr.ig_shape, pr.ig_scale
        Q = rss + pr.beta_precision * beta @ beta
        g_w = -(self.n_obs + self.q) + inv_s2 * Q - 2.0 * (a + 1) + 2.0 * b * inv_s2 + 2.0
        return np.append(g_beta, g_w)

    def pop_log_density(self, theta):
        return self.log_density(theta)

    def sparsity(self):
        return SparsityPattern.from_dense_mask(np.ones((self.pop_dim, self.pop_dim), dtype=bool))

    # -- closed forms ------------------------------------------------------

    def posterior_params(self):
        """(mean, precision, shape, scale) of the normal-inverse-gamma posterior."""
        pr = self.prior
        P = pr.beta_precision * np.eye(self.q) + self.XtX
        m = np.linalg.solve(P, self.Xty)
        shape = pr.ig_shape + 0.5 * self.n_obs
        scale = pr.ig_scale + 0.5 * (self.yty - m @ P @ m)
        return m, P, shape, scale

    def analytic_mode(self) -> np.ndarray:
        """Joint mode of the log density in (beta, log sigma)."""
        m, P, shape, scale = self.posterior_params()
        pr = self.prior
        # at beta = m, log D(w) = -c1 * 2w - scale * exp(-2w) + const
        c1 = 0.5 * (self.n_obs + self.q) + pr.ig_shape
        s2 = scale / c1
        return np.append(m, 0.5 * np.log(s2))

    def pop_names(self):
        return [f"beta_{j}" for j in range(self.q)] + ["log_sigma"]

    def config(self):
        return dict(self._settings)


def make_model_c(n, T=1, k=5, seed=0, sigma_true=1.0, prior: ModelCPrior | None = None) -> ModelC:
    if n < 1 or k < 1 or T < 1:
        raise ValueError("model C needs n, T, k >= 1")
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, k))])
    beta = np.concatenate([[5.0], np.linspace(-5.0, 5.0, k)])
    y = (X @ beta)[:, None] + sigma_true * rng.standard_normal((n, T))
    settings = dict(n=n, T=T, k=k, seed=seed, sigma_true=sigma_true)
    return ModelC(X, y, prior=prior, settings=settings)


def model_c_log_marglik(model: ModelC) -> float:
    """Exact log marginal likelihood (multivariate-t) of a model C dataset."""
    pr = model.prior
    m, P, shape, scale = model.posterior_params()
    q, n = model.q, model.n_obs
    return float(
        -0.5 * n * LOG_2PI
        + 0.5 * q * np.log(pr.beta_precision)
        - 0.5 * np.linalg.slogdet(P)[1]
        + pr.ig_shape * np.log(pr.ig_scale)
        - shape * np.log(scale)
        + gammaln(shape)
        - gammaln(pr.ig_shape)
    )
