"""Marginal likelihood from the by-products of a sampling run, and the
harmonic mean estimator for comparison."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .gds_core import GdsConfig, GdsRun, ScaleSearchFailed, run
from .mode_finder import find_mode
from .model import ModelCPrior, make_model_c, model_c_log_marglik

logger = logging.getLogger(__name__)

__all__ = [
    "MarglikEstimate",
    "estimate_log_ml",
    "log_ml_from_parts",
    "harmonic_mean_log_ml",
    "StudyCell",
    "marglik_study",
    "write_study_csv",
    "STUDY_COLUMNS",
]

STUDY_COLUMNS = ["k", "n", "M", "scale", "mvt_mean", "mvt_sd", "gds_mean", "gds_sd", "hme_mean", "hme_sd", "acc_pct", "status", "plugin_mean", "plugin_sd"]


@dataclass(frozen=True)
class MarglikEstimate:
    log_ml: float
    gamma_hat: float
    log_c1: float
    log_c2: float
    log_integral: float  # log of sum (2i - 1) exp(-v_i)
    M: int
    # same estimate with gamma taken as the mean of q_v over the drawn thresholds
    log_ml_plugin: float = math.nan
    gamma_plugin: float = math.nan


def log_ml_from_parts(log_c1: float, log_c2: float, v: np.ndarray, n_per_draw: np.ndarray, thresholds=None) -> MarglikEstimate:
    v = np.sort(np.asarray(v, dtype=float))
    n = np.asarray(n_per_draw)
    M = v.size
    gamma_hat = n.size / float(n.sum())
    ranks = np.arange(1, M + 1)
    log_integral = float(logsumexp(np.log(2.0 * ranks - 1.0) - v))
    base = log_c1 - log_c2 - 2.0 * math.log(M) + log_integral
    plugin = gamma_plugin = math.nan
    if thresholds is not None:
        # R / sum(n) tracks 1 / E[1 / q(v*)]; the mean of q at the thresholds tracks E[q(v*)]
        gamma_plugin = float(np.mean(np.searchsorted(v, np.asarray(thresholds), side="left")) / M)
        plugin = base - math.log(gamma_plugin)
    return MarglikEstimate(
        float(base - math.log(gamma_hat)), gamma_hat, float(log_c1), float(log_c2), log_integral, M,
        float(plugin), gamma_plugin,
    )


def estimate_log_ml(result: GdsRun) -> MarglikEstimate:
    """log c1 - log c2 - log gamma - 2 log M + log sum_i (2i - 1) exp(-v_i).

    Ranks i are 1-based, i.e. q_v(v_i) = i / M, and gamma is estimated by
    R over the total number of proposals.  ``log_ml_plugin`` replaces that
    gamma by the average of q_v over the thresholds actually drawn.
    """
    return log_ml_from_parts(result.log_c1, result.log_c2, result.qv.v, result.n_per_draw, result.thresholds)


def harmonic_mean_log_ml(model, samples: np.ndarray) -> float:
    ll = model.log_likelihood_many(np.atleast_2d(samples))
    return float(-(logsumexp(-ll) - math.log(ll.size)))


@dataclass
class StudyCell:
    k: int
    n: int
    M: int
    scale: float  # precision scale; the proposal covariance is H^{-1} / scale
    mvt: list = field(default_factory=list)
    gds: list = field(default_factory=list)
    hme: list = field(default_factory=list)
    plugin: list = field(default_factory=list)
    acc: list = field(default_factory=list)
    excluded: bool = False
    reason: str = ""

    def row(self) -> dict:
        def ms(x):
            if not x:
                return ("", "")
            a = np.asarray(x, dtype=float)
            return (float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0)

        mvt, gds, hme, plug = ms(self.mvt), ms(self.gds), ms(self.hme), ms(self.plugin)
        acc = 100.0 * float(np.mean(self.acc)) if self.acc and not self.excluded else ""
        if self.excluded:
            gds, hme, plug = ("", ""), ("", ""), ("", "")
        return {
            "k": self.k, "n": self.n, "M": self.M, "scale": self.scale,
            "mvt_mean": mvt[0], "mvt_sd": mvt[1], "gds_mean": gds[0], "gds_sd": gds[1],
            "hme_mean": hme[0], "hme_sd": hme[1], "acc_pct": acc,
            "status": "excluded" if self.excluded else "ok",
            "plugin_mean": plug[0], "plugin_sd": plug[1],
        }


def marglik_study(
    ks=(5, 25),
    ns=(200,),
    Ms=(1000,),
    scales=(0.5, 0.6, 0.7),
    replications=5,
    seed=0,
    R=250,
    T=1,
    rescale=False,
    prior: ModelCPrior | None = None,
    threads=1,
) -> list[StudyCell]:
    """Simulated conjugate regressions: analytic, GDS and HME log evidence.

    Each (k, n, replicate) dataset is simulated once and its mode found once;
    every (M, scale) pair reuses them.  With ``rescale`` off a proposal that
    fails the validity check excludes its cell rather than being widened.
    """
    cells = {}
    for k, n, M, sc in itertools.product(ks, ns, Ms, scales):
        cells[(k, n, M, sc)] = StudyCell(k, n, M, sc)
    for k, n in itertools.product(ks, ns):
        for rep in range(replications):
            data_seed = int(np.random.SeedSequence([seed, k, n, rep]).generate_state(1)[0])
            model = make_model_c(n, T=T, k=k, seed=data_seed, prior=prior)
            mvt = model_c_log_marglik(model)
            mode = find_mode(model)
            for M, sc in itertools.product(Ms, scales):
                cell = cells[(k, n, M, sc)]
                cell.mvt.append(mvt)
                if cell.excluded:
                    continue
                cfg = GdsConfig(
                    M=M, R=R, scale_s=1.0 / sc, seed=data_seed + int(M) + int(round(1000 * sc)),
                    max_scale_attempts=10 if rescale else 1, threads=threads,
                )
                try:
                    res = run(model, cfg, mode=mode)
                except ScaleSearchFailed as exc:
                    cell.excluded = True
                    cell.reason = str(exc)
                    logger.info("cell k=%d n=%d M=%d scale=%.2f excluded: %s", k, n, M, sc, exc)
                    continue
                est = estimate_log_ml(res)
                cell.gds.append(est.log_ml)
                cell.plugin.append(est.log_ml_plugin)
                cell.hme.append(harmonic_mean_log_ml(model, res.samples))
                cell.acc.append(res.acceptance_rate)
    return list(cells.values())


def write_study_csv(cells, path_or_file) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.DictWriter(fh, fieldnames=STUDY_COLUMNS)
        w.writeheader()
        for c in cells:
            w.writerow(c.row())
    finally:
        if own:
            fh.close()
