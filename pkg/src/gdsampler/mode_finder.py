"""Posterior mode by a sparse trust-region Newton method (Steihaug CG)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .sparse_linalg import (
    Coloring,
    NotPositiveDefinite,
    SparseSymMatrix,
    cholesky,
    color_pattern,
    fd_hessian,
    solve_lt,
)

logger = logging.getLogger(__name__)

__all__ = ["ModeOptions", "ModeResult", "ModeFindingError", "find_mode", "hessian_at_mode", "steihaug_cg"]


class ModeFindingError(RuntimeError):
    pass


@dataclass
class ModeOptions:
    tol: float = 1e-6
    max_iter: int = 500
    initial_radius: float | None = None
    max_radius: float = 1e6
    min_radius: float = 1e-12
    cg_rtol: float = 1e-10
    fd_step: float = 1e-6
    unit_warm_start: bool = True
    preconditioner: str = "cholesky"  # "cholesky", "diagonal" or "none"
    trace: object = None  # file-like; receives CSV rows when set


@dataclass
class ModeResult:
    theta_star: np.ndarray
    log_c1: float
    hessian: SparseSymMatrix  # negative Hessian of the log density at theta_star
    grad_norm: float
    iterations: int
    converged: bool
    coloring: Coloring | None = None


class _Preconditioner:
    """Change of variables p_hat = L' P p for a factor L L' of (P B P').

    The trust region is a ball in p_hat, i.e. an ellipsoid in p.  A Cholesky
    factor of the Hessian itself makes the transformed Hessian the identity,
    which is what keeps badly scaled hierarchical posteriors tractable.
    """

    def __init__(self, B: SparseSymMatrix, kind: str):
        self.factor = None
        self.scale = None
        if kind == "cholesky":
            self.factor = _shifted_cholesky(B)
        if self.factor is None and kind != "none":
            d = np.abs(B.diagonal())
            d[d == 0.0] = 1.0
            self.scale = np.sqrt(d)

    def to_hat(self, v):  # L^{-1} P v
        if self.factor is not None:
            return solve_lt(self.factor, v[self.factor.perm], mode="forward")
        return v / self.scale if self.scale is not None else v

    def from_hat(self, v):  # P' L^{-T} v
        if self.factor is not None:
            out = np.empty_like(v)
            out[self.factor.perm] = solve_lt(self.factor, v, mode="backward")
            return out
        return v / self.scale if self.scale is not None else v


def _shifted_cholesky(B: SparseSymMatrix, max_tries: int = 30):
    try:
        return cholesky(B)
    except NotPositiveDefinite:
        pass
    diag = B.diagonal()
    shift = 1e-3 * max(float(np.max(np.abs(diag))), 1e-8)
    for _ in range(max_tries):
        vals = B.values.copy()
        vals[B.col_ptr[:-1]] += np.maximum(shift - diag, shift)
        try:
            return cholesky(SparseSymMatrix(B.pattern, vals))
        except NotPositiveDefinite:
            shift *= 4.0
    return None


def steihaug_cg(B, g: np.ndarray, radius: float, rtol: float, max_iter: int):
    """Approximately minimize g'p + p'Bp/2 subject to ||p|| <= radius.

    ``B`` only needs ``matvec``.  Returns (p, hit_boundary).
    """
    p = np.zeros_like(g)
    r = g.copy()
    d = -r
    rr = r @ r
    stop = rtol * np.sqrt(rr)
    if np.sqrt(rr) <= stop or rr == 0.0:
        return p, False
    for _ in range(max_iter):
        Bd = B.matvec(d)
        dBd = d @ Bd
        if dBd <= 0.0:
            return p + _to_boundary(p, d, radius) * d, True
        alpha = rr / dBd
        p_next = p + alpha * d
        if np.linalg.norm(p_next) >= radius:
            return p + _to_boundary(p, d, radius) * d, True
        p = p_next
        r = r + alpha * Bd
        rr_next = r @ r
        if np.sqrt(rr_next) <= stop:
            return p, False
        d = -r + (rr_next / rr) * d
        rr = rr_next
    return p, False


class _Transformed:
    def __init__(self, B, pre):
        self.B, self.pre = B, pre

    def matvec(self, v):
        return self.pre.to_hat(self.B.matvec(self.pre.from_hat(v)))


def _to_boundary(p, d, radius):
    # positive tau with ||p + tau d|| = radius
    a = d @ d
    b = 2.0 * (p @ d)
    c = p @ p - radius**2
    return (-b + np.sqrt(max(b * b - 4.0 * a * c, 0.0))) / (2.0 * a)


def find_mode(model, theta0=None, opts: ModeOptions | None = None) -> ModeResult:
    """Maximize ``model.log_density`` starting from ``theta0``.

    Ratio test: accept if rho > 0.1, double the radius when rho > 0.75 at the
    boundary, quarter it when rho < 0.1.  Stops when the sup-norm of the
    gradient is below ``opts.tol``.

    With ``opts.unit_warm_start`` the household blocks are first moved to
    their optimum with the population block held at its starting value.
    Hierarchical posteriors with a flat prior on a scale parameter have an
    unbounded ridge as that scale goes to zero; starting the joint iteration
    from household values that already reflect the data keeps it in the
    basin of the interior mode.
    """
    opts = opts or ModeOptions()
    theta = np.array(model.default_start() if theta0 is None else theta0, dtype=float)
    f = model.log_density(theta)
    if not np.isfinite(f):
        raise ModeFindingError("log density is not finite at the starting point")
    pattern = model.sparsity()
    coloring = color_pattern(pattern)
    g = model.gradient(theta)
    if opts.trace is not None:
        opts.trace.write("iteration,log_density,grad_norm,radius\n")

    iteration = 0
    n_pop = getattr(model, "pop_dim", 0)
    if opts.unit_warm_start and 0 < n_pop < theta.size:
        free = np.ones(theta.size, dtype=bool)
        free[theta.size - n_pop :] = False
        theta, f, g, iteration, _ = _trust_region(model, theta, f, g, pattern, coloring, opts, free, 0)
    theta, f, g, iteration, converged = _trust_region(model, theta, f, g, pattern, coloring, opts, None, iteration)
    return _result(model, theta, f, g, pattern, coloring, opts, iteration, converged)


def _trust_region(model, theta, f, g, pattern, coloring, opts, free, iteration):
    """Trust-region iterations over the coordinates in ``free`` (all if None).

    Returns (theta, f, g, iterations so far, converged).
    """

    def neg_grad(t):
        return -model.gradient(t)

    def masked(v):
        return v if free is None else np.where(free, v, 0.0)

    radius = opts.initial_radius or 10.0 * max(1.0, float(np.max(np.abs(theta))) if theta.size else 1.0)
    # changes in f below this are roundoff, not information
    noise = 64.0 * np.finfo(float).eps * max(1.0, abs(f))
    while True:
        gm = masked(g)
        gnorm = float(np.max(np.abs(gm))) if g.size else 0.0
        if opts.trace is not None:
            opts.trace.write(f"{iteration},{f!r},{gnorm!r},{radius!r}\n")
        if gnorm <= opts.tol:
            return theta, f, g, iteration, True
        if iteration >= opts.max_iter:
            return theta, f, g, iteration, False
        iteration += 1
        B = fd_hessian(neg_grad, theta, pattern, coloring, step=opts.fd_step, g0=-g)
        if free is not None:
            B = _restrict(B, free)
        pre = _Preconditioner(B, opts.preconditioner)
        B_hat = _Transformed(B, pre)
        g_hat = pre.to_hat(-gm)
        while True:
            step_hat, at_boundary = steihaug_cg(B_hat, g_hat, radius, opts.cg_rtol, 2 * theta.size + 10)
            step = masked(pre.from_hat(step_hat))
            predicted = gm @ step - 0.5 * step @ B.matvec(step)
            trial = theta + step
            f_trial = model.log_density(trial)
            g_trial = None
            if not np.isfinite(f_trial):
                rho = -np.inf
            elif predicted > noise:
                rho = (f_trial - f) / predicted
            else:
                # the model predicts a change below roundoff; judge the step by
                # whether it shrank the gradient without visibly lowering f
                g_trial = model.gradient(trial)
                better = np.max(np.abs(masked(g_trial))) < gnorm and f_trial >= f - noise
                rho = 1.0 if better else -np.inf
            if rho < 0.1:
                radius *= 0.25
            elif rho > 0.75 and at_boundary:
                radius = min(2.0 * radius, opts.max_radius)
            if rho > 0.1:
                theta, f = trial, f_trial
                g = model.gradient(theta) if g_trial is None else g_trial
                break
            if radius < opts.min_radius:
                if not np.isfinite(f_trial):
                    raise ModeFindingError("trust region collapsed on a non-finite log density")
                logger.warning("trust region collapsed at iteration %d", iteration)
                return theta, f, g, iteration, False


def _restrict(B: SparseSymMatrix, free: np.ndarray) -> SparseSymMatrix:
    # zero the rows and columns of fixed coordinates, unit diagonal there
    rows, cols = B.pattern.coo()
    vals = np.where(free[rows] & free[cols], B.values, 0.0)
    fixed_diag = B.col_ptr[:-1][~free]
    vals[fixed_diag] = 1.0
    return SparseSymMatrix(B.pattern, vals)


def _result(model, theta, f, g, pattern, coloring, opts, iteration, converged):
    H = fd_hessian(lambda t: -model.gradient(t), theta, pattern, coloring, step=opts.fd_step, g0=-g)
    return ModeResult(
        theta_star=theta,
        log_c1=float(f),
        hessian=H,
        grad_norm=float(np.max(np.abs(g))) if g.size else 0.0,
        iterations=iteration,
        converged=bool(converged),
        coloring=coloring,
    )


def hessian_at_mode(model, result: ModeResult, step: float = 1e-5) -> SparseSymMatrix:
    """Negative Hessian of the log density at the mode; must be positive definite."""
    if not result.converged:
        raise ModeFindingError("mode finding did not converge")
    pattern = model.sparsity()
    coloring = result.coloring or color_pattern(pattern)
    H = fd_hessian(lambda t: -model.gradient(t), result.theta_star, pattern, coloring, step=step)
    cholesky(H)  # raises NotPositiveDefinite at a saddle or flat direction
    return H
