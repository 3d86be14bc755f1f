import csv
import io
import math

import numpy as np
import pytest
from scipy.special import logsumexp

from gdsampler.gds_core import GdsConfig, run
from gdsampler.marglik import (
    STUDY_COLUMNS,
    StudyCell,
    estimate_log_ml,
    harmonic_mean_log_ml,
    log_ml_from_parts,
    marglik_study,
    write_study_csv,
)
from gdsampler.model import HierarchicalModel, make_normal_mean_model

from oracles import normal_normal_log_evidence


class BoxLikelihood(HierarchicalModel):
    """theta ~ U(0, 1) with y_t ~ N(theta, 1): compact prior support."""

    pop_dim = 1

    def __init__(self, y):
        self.y = np.asarray(y, dtype=float)

    def _log_terms(self, thetas):
        t = thetas[:, 0]
        ll = -0.5 * self.y.size * math.log(2 * math.pi) - 0.5 * ((self.y[None, :] - t[:, None]) ** 2).sum(axis=1)
        lp = np.where((t > 0) & (t < 1), 0.0, -np.inf)
        return ll, lp


def test_single_point_grid():
    est = log_ml_from_parts(2.0, 0.5, np.array([0.3]), np.array([4, 2]))
    gamma = 2 / 6
    assert est.log_ml == pytest.approx(2.0 - 0.5 - math.log(gamma) - 0.3, abs=1e-14)
    assert est.gamma_hat == pytest.approx(gamma)


def test_formula_with_one_based_ranks():
    v = np.array([0.9, 0.1, 0.4])
    est = log_ml_from_parts(0.0, 0.0, v, np.ones(5, dtype=int))
    vs = np.sort(v)
    expected = math.log(sum((2 * i - 1) * math.exp(-vs[i - 1]) for i in (1, 2, 3)) / 9)
    assert est.log_ml == pytest.approx(expected, abs=1e-14)


def test_plugin_gamma_counts_grid_below_threshold():
    v = np.array([0.1, 0.2, 0.3, 0.4])
    est = log_ml_from_parts(0.0, 0.0, v, np.array([2, 2]), thresholds=np.array([0.25, 5.0]))
    assert est.gamma_plugin == pytest.approx((2 / 4 + 4 / 4) / 2)


def test_normal_normal_evidence():
    m = make_normal_mean_model(dim=1, n_obs=5, seed=0)
    exact = normal_normal_log_evidence(m.y[:, 0], m.prior_mean[0], m.prior_cov[0, 0], m.noise_cov[0, 0])
    assert m.log_evidence() == pytest.approx(exact, abs=1e-12)
    est = estimate_log_ml(run(m, GdsConfig(M=10_000, R=250, scale_s=1.5, seed=0)))
    assert abs(est.log_ml - exact) <= 0.15
    assert abs(est.log_ml_plugin - exact) <= 0.05


def test_hme_single_sample_is_its_log_likelihood():
    m = make_normal_mean_model(dim=2, n_obs=3, seed=1)
    th = np.array([[0.2, -0.4]])
    assert harmonic_mean_log_ml(m, th) == pytest.approx(m.log_likelihood(th[0]), abs=1e-12)


def test_hme_matches_quadrature_on_compact_support():
    # Uniform prior on (0, 1): the likelihood is bounded away from zero, so
    # the harmonic mean has finite variance and converges to the evidence.
    m = BoxLikelihood(np.array([0.4, 1.3]))
    grid = (np.arange(20_000) + 0.5) / 20_000
    ll = m.log_likelihood_many(grid[:, None])
    log_ev = float(logsumexp(ll) - math.log(grid.size))
    # exact posterior draws by inverse CDF on the grid
    cdf = np.cumsum(np.exp(ll - ll.max()))
    cdf /= cdf[-1]
    u = np.random.default_rng(0).random(200_000)
    draws = np.interp(u, cdf, grid)
    assert harmonic_mean_log_ml(m, draws[:, None]) == pytest.approx(log_ev, abs=5e-3)


def test_excluded_cell_row():
    cell = StudyCell(5, 200, 1000, 0.9, mvt=[-300.0, -302.0], excluded=True, reason="s=1.11")
    row = cell.row()
    assert row["status"] == "excluded"
    assert row["gds_mean"] == "" and row["acc_pct"] == ""
    assert row["mvt_mean"] == pytest.approx(-301.0)


def test_study_small_grid_and_csv():
    cells = marglik_study(ks=(2,), ns=(40,), Ms=(500,), scales=(0.5, 0.9), replications=2, R=50, T=1)
    by_scale = {c.scale: c for c in cells}
    ok = by_scale[0.5]
    assert not ok.excluded and len(ok.gds) == 2 and len(ok.mvt) == 2
    assert all(abs(g - t) < 3 for g, t in zip(ok.gds, ok.mvt))
    buf = io.StringIO()
    write_study_csv(cells, buf)
    rows = list(csv.DictReader(io.StringIO(buf.getvalue())))
    assert list(rows[0]) == STUDY_COLUMNS
    assert len(rows) == 2


def test_invalid_scale_excluded_not_crashing():
    cells = marglik_study(ks=(5,), ns=(200,), Ms=(1000,), scales=(1.2,), replications=1, R=20, T=1)
    assert cells[0].excluded
    assert cells[0].row()["status"] == "excluded"
