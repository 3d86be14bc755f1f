"""Generalized direct sampling: exact independent draws by rejection on a
threshold drawn from the discretized density of v = -log Phi."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .mode_finder import ModeOptions, ModeResult, find_mode, hessian_at_mode
from .proposal import PHI_SLACK, Proposal, build_proposal, log_phi_many

logger = logging.getLogger(__name__)

__all__ = [
    "GdsConfig",
    "GdsRun",
    "QvEstimate",
    "InvalidProposal",
    "ScaleSearchFailed",
    "ProposalCapExceeded",
    "estimate_qv",
    "auto_scale",
    "sample_threshold",
    "sample_thresholds",
    "rejection_sample_one",
    "run",
    "load_run",
    "default_threads",
]

CHUNK = 1024  # proposals per evaluation batch; fixed so streams never depend on threads
RESCALE = 1.5


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("GDS_THREADS", "1")))
    except ValueError:
        return 1


class InvalidProposal(Exception):
    """Some proposal draw had log Phi > 0: g is not dominating D/c1."""

    def __init__(self, scale_s: float, worst_log_phi: float, worst_theta: np.ndarray | None = None):
        super().__init__(f"proposal invalid at s={scale_s:.6g}: max log Phi = {worst_log_phi:.6g}")
        self.scale_s = scale_s
        self.worst_log_phi = worst_log_phi
        self.worst_theta = worst_theta


class ScaleSearchFailed(RuntimeError):
    def __init__(self, scale_s: float, worst_log_phi: float, attempts: int):
        super().__init__(
            f"no valid proposal after {attempts} attempt(s); last s={scale_s:.6g}, max log Phi = {worst_log_phi:.6g}"
        )
        self.scale_s = scale_s
        self.worst_log_phi = worst_log_phi
        self.attempts = attempts


class ProposalCapExceeded(RuntimeError):
    def __init__(self, v_star: float, count: int):
        super().__init__(f"no acceptance within {count} proposals (threshold v*={v_star:.6g})")
        self.v_star = v_star
        self.count = count


@dataclass(frozen=True)
class QvEstimate:
    v: np.ndarray  # sorted ascending
    cum_count: np.ndarray  # number of draws with v strictly below v[i]
    log_weights: np.ndarray  # log of the segment weights, -inf for empty segments

    @property
    def M(self) -> int:
        return self.v.size

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @classmethod
    def from_values(cls, v: np.ndarray) -> "QvEstimate":
        v = np.sort(np.asarray(v, dtype=float))
        cnt = np.searchsorted(v, v, side="left")
        v_next = np.append(v[1:], np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            # cnt * (exp(-v_i) - exp(-v_{i+1})) in logs
            log_w = np.log(cnt) - v + np.log(-np.expm1(v - v_next))
        log_w[(cnt == 0) | ~np.isfinite(v) | (v == v_next)] = -np.inf
        if not np.any(np.isfinite(log_w)):
            raise ValueError("q_v grid has no positive weight; need at least two distinct finite v values")
        return cls(v=v, cum_count=cnt, log_weights=log_w)

    def cdf(self, x: np.ndarray) -> np.ndarray:
        """CDF of the threshold density, proportional to q_v(v) exp(-v)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        finite = np.isfinite(self.log_weights)
        v, cnt, lw = self.v[finite], self.cum_count[finite], self.log_weights[finite]
        v_next = np.append(self.v[1:], np.inf)[finite]
        total = logsumexp(lw)
        cum = np.concatenate([[0.0], np.cumsum(np.exp(lw - total))])
        j = np.searchsorted(v, x, side="right") - 1
        out = np.zeros_like(x)
        inside = j >= 0
        jj = j[inside]
        # partial mass of segment jj from v_j up to x (clipped at v_{j+1})
        xx = np.minimum(x[inside], v_next[jj])
        part = np.exp(np.log(cnt[jj]) - v[jj] - total) * -np.expm1(v[jj] - xx)
        out[inside] = cum[jj] + part
        return np.minimum(out, 1.0)


@dataclass
class GdsConfig:
    M: int = 1000
    R: int = 100
    scale_s: float = 1.02
    max_scale_attempts: int = 10
    max_proposals_per_draw: int = 10_000_000
    seed: int = 0
    threads: int = field(default_factory=default_threads)

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be at least 2")
        if self.R < 1:
            raise ValueError("R must be at least 1")
        if not self.scale_s > 0:
            raise ValueError("scale_s must be positive")
        if self.max_scale_attempts < 1 or self.max_proposals_per_draw < 1 or self.threads < 1:
            raise ValueError("max_scale_attempts, max_proposals_per_draw and threads must be positive")


@dataclass
class GdsRun:
    samples: np.ndarray
    n_per_draw: np.ndarray
    thresholds: np.ndarray
    qv: QvEstimate
    log_c1: float
    log_c2: float
    scale_s_final: float
    config: GdsConfig
    mode: ModeResult | None = None
    proposal: Proposal | None = None
    scale_attempts: int = 1
    timings: dict = field(default_factory=dict)
    param_names: list | None = None

    @property
    def total_proposals(self) -> int:
        return int(self.n_per_draw.sum())

    @property
    def acceptance_rate(self) -> float:
        return self.samples.shape[0] / self.total_proposals

    def meta(self) -> dict:
        n = self.n_per_draw
        return {
            "log_c1": self.log_c1,
            "log_c2": self.log_c2,
            "scale_s": self.scale_s_final,
            "scale_attempts": self.scale_attempts,
            "M": int(self.qv.M),
            "R": int(self.samples.shape[0]),
            "seed": int(self.config.seed),
            "dim": int(self.samples.shape[1]),
            "total_proposals": self.total_proposals,
            "mean_proposals_per_draw": float(n.mean()),
            "median_proposals_per_draw": float(np.median(n)),
            "max_proposals_per_draw": int(n.max()),
            "config": {k: v for k, v in asdict(self.config).items() if k != "threads"},
        }

    def save(self, directory, extra_meta: dict | None = None) -> Path:
        """Write samples.csv, meta.json, vgrid.bin and thresholds.csv.

        Timings are left out so that equal seeds give equal files.
        """
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        names = self.param_names or [f"theta{i}" for i in range(self.samples.shape[1])]
        np.savetxt(out / "samples.csv", self.samples, delimiter=",", fmt="%.17g", header=",".join(names), comments="")
        table = np.column_stack([np.arange(self.thresholds.size), self.thresholds, self.n_per_draw])
        np.savetxt(out / "thresholds.csv", table, delimiter=",", fmt=["%d", "%.17g", "%d"], header="draw,v_star,n_proposals", comments="")
        self.qv.v.astype("<f8").tofile(out / "vgrid.bin")
        meta = self.meta()
        if extra_meta:
            meta.update(extra_meta)
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return out


def load_run(directory) -> dict:
    """Read a saved run back as plain arrays plus the metadata dict."""
    d = Path(directory)
    samples = np.loadtxt(d / "samples.csv", delimiter=",", skiprows=1, ndmin=2)
    thr = np.loadtxt(d / "thresholds.csv", delimiter=",", skiprows=1, ndmin=2)
    return {
        "samples": samples,
        "thresholds": thr[:, 1],
        "n_per_draw": thr[:, 2].astype(np.int64),
        "v": np.fromfile(d / "vgrid.bin", dtype="<f8"),
        "meta": json.loads((d / "meta.json").read_text()),
    }


def _rng(seed_seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_seq))


def _neg_log_phi_chunk(model, mode, proposal, m, seed_seq):
    thetas, z = proposal.sample_many(_rng(seed_seq), m)
    lphi = log_phi_many(model, mode, proposal, thetas, z)
    i = int(np.argmax(lphi))
    return -lphi, float(lphi[i]), thetas[i]


def estimate_qv(model, mode, proposal: Proposal, M: int, rng, threads: int = 1) -> QvEstimate:
    """Draw ``M`` proposals and tabulate v = -log Phi.

    ``rng`` is a Generator or a SeedSequence.  Draws are generated in fixed
    chunks with one child stream per chunk so the result does not depend on
    ``threads``.  Raises InvalidProposal if any log Phi exceeds the slack.
    """
    if isinstance(rng, np.random.SeedSequence):
        parent = rng
    else:
        parent = np.random.SeedSequence(rng.integers(0, 2**63))
    sizes = [CHUNK] * (M // CHUNK) + ([M % CHUNK] if M % CHUNK else [])
    children = parent.spawn(len(sizes))
    jobs = list(zip(sizes, children))

    def work(job):
        return _neg_log_phi_chunk(model, mode, proposal, job[0], job[1])

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, jobs))
    else:
        parts = [work(j) for j in jobs]
    worst = max(range(len(parts)), key=lambda i: parts[i][1])
    if parts[worst][1] > PHI_SLACK:
        raise InvalidProposal(proposal.scale_s, parts[worst][1], parts[worst][2])
    return QvEstimate.from_values(np.concatenate([p[0] for p in parts]))


def auto_scale(model, mode, hessian, config: GdsConfig, rng) -> tuple[Proposal, QvEstimate, int]:
    """Grow s by a factor 1.5 until the q_v draws are all valid.

    Each attempt uses fresh draws.  Returns (proposal, qv, attempts used).
    """
    parent = rng if isinstance(rng, np.random.SeedSequence) else np.random.SeedSequence(rng.integers(0, 2**63))
    s = config.scale_s
    worst = np.nan
    for attempt, child in enumerate(parent.spawn(config.max_scale_attempts), start=1):
        proposal = build_proposal(mode, hessian, s)
        try:
            qv = estimate_qv(model, mode, proposal, config.M, child, config.threads)
            return proposal, qv, attempt
        except InvalidProposal as exc:
            worst = exc.worst_log_phi
            logger.info("s=%.4g invalid (max log Phi %.3g)", s, worst)
            if attempt == config.max_scale_attempts:
                raise ScaleSearchFailed(s, worst, attempt) from exc
            s *= RESCALE
    raise AssertionError("unreachable")


def sample_thresholds(qv: QvEstimate, rng: np.random.Generator, size: int) -> np.ndarray:
    """``size`` thresholds v* from the piecewise density q_v(v) exp(-v)."""
    lw = qv.log_weights
    p = np.exp(lw - logsumexp(lw))
    j = rng.choice(qv.M, size=size, p=p / p.sum())
    eta = rng.random(size)
    v = qv.v
    v_next = np.append(v[1:], np.inf)
    # v_j - log(1 - eta (1 - exp(v_j - v_{j+1}))); the tail segment is exponential
    return v[j] - np.log1p(eta * np.expm1(v[j] - v_next[j]))


def sample_threshold(qv: QvEstimate, rng: np.random.Generator) -> float:
    return float(sample_thresholds(qv, rng, 1)[0])


def rejection_sample_one(model, mode, proposal: Proposal, v_star: float, rng, cap: int = 10_000_000):
    """Propose until -log Phi < v_star; returns (theta, proposals used).

    Proposals are generated in blocks of 1, 2, 4, ... up to 1024, so short
    waits stay cheap and long ones are vectorized.
    """
    used = 0
    block = 1
    while used < cap:
        m = min(block, cap - used)
        thetas, z = proposal.sample_many(rng, m)
        p = -log_phi_many(model, mode, proposal, thetas, z)
        hits = np.flatnonzero(p < v_star)
        if hits.size:
            i = int(hits[0])
            return thetas[i], used + i + 1
        used += m
        block = min(2 * block, CHUNK)
    raise ProposalCapExceeded(float(v_star), used)


def run(model, config: GdsConfig, theta0=None, mode_opts: ModeOptions | None = None, mode: ModeResult | None = None) -> GdsRun:
    """Find the mode, fit the proposal, estimate q_v and collect R draws.

    Random streams: one for the q_v phase, one for all thresholds (drawn
    before any rejection sampling), and one child per draw, so that output
    is identical for any number of threads.
    """
    timings = {}
    t0 = time.perf_counter()
    if mode is None:
        mode = find_mode(model, theta0, mode_opts)
    hessian = hessian_at_mode(model, mode)
    timings["mode"] = time.perf_counter() - t0

    root = np.random.SeedSequence(config.seed)
    qv_seq, thr_seq, draw_seq = root.spawn(3)

    t0 = time.perf_counter()
    proposal, qv, attempts = auto_scale(model, mode, hessian, config, qv_seq)
    timings["qv"] = time.perf_counter() - t0

    thresholds = sample_thresholds(qv, _rng(thr_seq), config.R)
    draw_seqs = draw_seq.spawn(config.R)
    cap = config.max_proposals_per_draw

    def one(r):
        return rejection_sample_one(model, mode, proposal, thresholds[r], _rng(draw_seqs[r]), cap)

    t0 = time.perf_counter()
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(one, range(config.R)))
    else:
        results = [one(r) for r in range(config.R)]
    timings["draws"] = time.perf_counter() - t0

    samples = np.array([r[0] for r in results]).reshape(config.R, model.dim)
    counts = np.array([r[1] for r in results], dtype=np.int64)
    names = model.param_names() if hasattr(model, "param_names") else None
    return GdsRun(
        samples=samples,
        n_per_draw=counts,
        thresholds=thresholds,
        qv=qv,
        log_c1=float(mode.log_c1),
        log_c2=float(proposal.log_c2),
        scale_s_final=float(proposal.scale_s),
        config=config,
        mode=mode,
        proposal=proposal,
        scale_attempts=attempts,
        timings=timings,
        param_names=names,
    )
