"""Scaled multivariate normal proposal centred at the posterior mode.

The proposal is MVN(theta*, s H^{-1}) where H is the negative Hessian at the
mode.  It is stored through the Cholesky factor of its precision H / s, so a
draw costs one sparse backward solve and a density evaluation costs one
sparse multiply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sparse_linalg import CholFactor, SparseSymMatrix, cholesky, solve_lt

__all__ = ["Proposal", "build_proposal", "log_phi", "log_phi_many", "PHI_SLACK"]

# log Phi values in (0, PHI_SLACK] are floating-point noise around the mode
PHI_SLACK = 1e-8

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Proposal:
    mean: np.ndarray
    factor: CholFactor
    scale_s: float
    log_c2: float

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        theta, _ = self.sample_many(rng, 1)
        return theta[0]

    def sample_many(self, rng: np.random.Generator, m: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``m`` proposals; returns (thetas (m, dim), z (m, dim)).

        ``z`` are the standard normals behind each draw, so that
        ``log_g(theta) = log_c2 - |z|^2 / 2`` is available for free.
        """
        z = rng.standard_normal((m, self.dim))
        return self.from_standard(z), z

    def from_standard(self, z: np.ndarray) -> np.ndarray:
        """Map standard normal rows ``z`` to proposal draws."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        w = solve_lt(self.factor, np.ascontiguousarray(z.T), mode="backward")
        out = np.empty((z.shape[0], self.dim))
        out[:, self.factor.perm] = w.T
        out += self.mean
        return out

    def to_standard(self, thetas: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`from_standard`: z = L' P (theta - theta*)."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        diff = (thetas - self.mean)[:, self.factor.perm]
        return self.factor.lt_multiply(np.ascontiguousarray(diff.T)).T

    def log_g(self, theta: np.ndarray) -> float:
        return float(self.log_g_many(theta)[0])

    def log_g_many(self, thetas: np.ndarray) -> np.ndarray:
        z = self.to_standard(thetas)
        return self.log_c2 - 0.5 * np.einsum("ij,ij->i", z, z)


def build_proposal(mode, hessian: SparseSymMatrix, scale_s: float) -> Proposal:
    """Factor ``hessian / scale_s``; raises NotPositiveDefinite on failure."""
    if not scale_s > 0:
        raise ValueError(f"scale_s must be positive, got {scale_s}")
    theta_star = np.asarray(getattr(mode, "theta_star", mode), dtype=float).copy()
    factor = cholesky(hessian.scaled(1.0 / scale_s))
    log_c2 = -0.5 * theta_star.size * _LOG_2PI + factor.log_det_half
    theta_star.setflags(write=False)
    return Proposal(mean=theta_star, factor=factor, scale_s=float(scale_s), log_c2=float(log_c2))


def log_phi_many(model, mode, proposal: Proposal, thetas: np.ndarray, z: np.ndarray | None = None) -> np.ndarray:
    """log D(theta) - log g(theta) - log c1 + log c2 for each row of ``thetas``.

    Pass the standard normals ``z`` used to generate the rows to skip the
    multiply by the factor.  Values in (0, PHI_SLACK] are set to 0; -inf
    is returned where the log density is out of support.
    """
    thetas = np.atleast_2d(thetas)
    if z is None:
        z = proposal.to_standard(thetas)
    log_d = model.log_density_many(thetas)
    with np.errstate(invalid="ignore"):
        out = log_d - mode.log_c1 + 0.5 * np.einsum("ij,ij->i", z, z)
    out[(out > 0.0) & (out <= PHI_SLACK)] = 0.0
    out[np.isnan(out)] = -np.inf
    return out


def log_phi(model, mode, proposal: Proposal, theta: np.ndarray) -> float:
    return float(log_phi_many(model, mode, proposal, theta)[0])
