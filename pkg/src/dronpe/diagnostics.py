"""Uncertainty-quantification diagnostics for conditional posteriors.

Every metric works with either a :class:`~dronpe.flows.FlowModel` or any
object exposing ``log_prob(theta, x)`` and ``sample_with_log_prob(x, M, rng)``
(see :class:`GaussianConditional`, used for analytic checks).
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import _kernels
from .errors import DimError, NonFiniteEvaluation
from .flows import FlowModel, log_prob as flow_log_prob, sample_with_base
from .simulators import PairDataset

__all__ = [
    "DEFAULT_ALPHAS",
    "CoverageCurve",
    "SbcRanks",
    "KlcalResult",
    "DiagnosticsReport",
    "GaussianConditional",
    "posterior_draws",
    "hpdr_coverage",
    "coverage_from_draws",
    "sbc_ranks",
    "nlpd",
    "klcal_from_ranks",
    "klcal_estimate",
    "bernoulli_kl",
    "klcov_oracle_gaussian",
    "expected_kl_oracle_gaussian",
    "delta_cov",
    "diagnose",
]

DEFAULT_ALPHAS = np.round(0.05 * np.arange(1, 19), 10)
RIDGE = 1e-3
NEWTON_MAX_ITER = 200
NEWTON_TOL = 1e-10
BOOTSTRAP = 200
DENSITY_FLOOR = 1e-300


# --------------------------------------------------------------------------
# model adapters
# --------------------------------------------------------------------------

class GaussianConditional:
    """1-D Gaussian conditional ``q(theta | x) = N(slope * x + intercept, var)``.

    The exact posterior of the ``gaussian_linear`` task is
    ``GaussianConditional(0.5, 0.0, 0.5)``; the prior is ``(0, 0, 1)``.
    """

    d_theta = 1
    d_x = 1

    def __init__(self, slope=0.5, intercept=0.0, var=0.5):
        if not var > 0:
            raise ValueError("variance must be positive")
        self.slope = float(slope)
        self.intercept = float(intercept)
        self.var = float(var)

    def __repr__(self):
        return f"GaussianConditional(slope={self.slope}, intercept={self.intercept}, var={self.var})"

    def mean(self, x):
        return self.slope * np.asarray(x, dtype=np.float64).reshape(-1) + self.intercept

    def log_prob(self, theta, x):
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        r = theta - self.mean(x)
        return -0.5 * r * r / self.var - 0.5 * math.log(2 * math.pi * self.var)

    def cdf(self, t, x):
        return ndtr((np.asarray(t) - self.mean(x)[..., None]) / math.sqrt(self.var))

    def sample_with_log_prob(self, x, count, rng):
        m = self.mean(x)
        eps = rng.standard_normal((m.shape[0], count))
        samples = m[:, None] + math.sqrt(self.var) * eps
        logq = -0.5 * eps * eps - 0.5 * math.log(2 * math.pi * self.var)
        return samples[..., None], logq


def _xy(pairs):
    if isinstance(pairs, PairDataset):
        return pairs.theta, pairs.x
    theta, x = pairs
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if theta.ndim == 1:
        theta = theta[:, None]
    if x.ndim == 1:
        x = x[:, None]
    return theta, x


def _log_prob(model, theta, x):
    if isinstance(model, FlowModel):
        return flow_log_prob(model, theta, x)
    return np.asarray(model.log_prob(theta, x), dtype=np.float64)


def posterior_draws(model, x, count, rng, chunk_rows=262144):
    """``count`` draws per row of ``x`` and their log densities.

    Returns ``(samples (N, M, d_theta), logq (N, M))``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if count < 1:
        raise ValueError("need at least one posterior draw")
    if not isinstance(model, FlowModel):
        return model.sample_with_log_prob(x, count, rng)
    n, d = x.shape[0], model.d_theta
    samples = np.empty((n, count, d))
    logq = np.empty((n, count))
    per = max(1, chunk_rows // count)
    for s in range(0, n, per):
        xs = x[s:s + per]
        u = rng.standard_normal((xs.shape[0] * count, d))
        th, logdet = sample_with_base(model, np.repeat(xs, count, axis=0), u)
        base = -0.5 * np.sum(u * u, axis=1) - 0.5 * d * math.log(2 * math.pi)
        samples[s:s + per] = th.reshape(xs.shape[0], count, d)
        logq[s:s + per] = (base + logdet).reshape(xs.shape[0], count)
    return samples, logq


# --------------------------------------------------------------------------
# coverage and SBC
# --------------------------------------------------------------------------

@dataclass
class CoverageCurve:
    alphas: np.ndarray
    coverages: np.ndarray
    se: np.ndarray
    n_test: int
    M: int

    def table(self):
        lines = ["alpha,coverage,se"]
        for a, c, s in zip(self.alphas, self.coverages, self.se):
            lines.append(f"{repr(float(a))},{repr(float(c))},{repr(float(s))}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {
            "alphas": [float(a) for a in self.alphas],
            "coverages": [float(c) for c in self.coverages],
            "se": [float(s) for s in self.se],
            "n_test": int(self.n_test),
            "M": int(self.M),
        }


def nearest_rank(alpha, m):
    """1-based nearest-rank index ``ceil(alpha * m)`` (at least 1)."""
    # the small slack keeps e.g. 0.15 * 1000 from rounding up to 151
    return max(1, int(math.ceil(alpha * m - 1e-9)))


def coverage_from_draws(true_logq, sample_logq, alphas):
    """Coverage given the true-parameter and sample log densities.

    ``theta_i`` is covered at level ``alpha`` when its density is at least
    the ``ceil(alpha M)``-th smallest sample density (ties count as covered).
    """
    true_logq = np.asarray(true_logq, dtype=np.float64)
    n, m = sample_logq.shape
    counts = _kernels.count_less_equal(sample_logq, true_logq)
    alphas = np.atleast_1d(np.asarray(alphas, dtype=np.float64))
    cov = np.array([np.mean(counts >= nearest_rank(a, m)) for a in alphas])
    se = np.sqrt(cov * (1.0 - cov) / n)
    return CoverageCurve(alphas, cov, se, n, m)


def hpdr_coverage(model, test_pairs, M, alphas=DEFAULT_ALPHAS, rng=None, draws=None):
    """Expected HPDR coverage estimated with ``M`` posterior draws per test pair."""
    theta, x = _xy(test_pairs)
    if theta.shape[0] == 0:
        raise ValueError("need at least one test pair")
    if M < 20:
        raise ValueError("M must be at least 20")
    if draws is None:
        draws = posterior_draws(model, x, M, rng if rng is not None else np.random.default_rng(0))
    true_logq = _log_prob(model, theta, x)
    return coverage_from_draws(true_logq, draws[1], alphas)


def delta_cov(curve):
    """Absolute miscoverage ``|C_alpha - (1 - alpha)|`` per level."""
    return np.abs(curve.coverages - (1.0 - curve.alphas))


@dataclass
class SbcRanks:
    u: np.ndarray
    summary: str


def sbc_ranks(model, test_pairs, M, summary="density", theta0=None, rng=None, draws=None):
    """SBC ranks ``u_i = #{m : S(sample_m) < S(theta_i)} / M``.

    ``summary='density'`` uses ``S = q(theta | x)``; ``summary='distance'``
    uses ``S = ||theta - theta0||`` with ``theta0`` a vector or one row per pair.
    """
    theta, x = _xy(test_pairs)
    if draws is None:
        draws = posterior_draws(model, x, M, rng if rng is not None else np.random.default_rng(0))
    samples, logq = draws
    m = samples.shape[1]
    if summary == "density":
        ref = _log_prob(model, theta, x)
        vals = logq
    elif summary == "distance":
        if theta0 is None:
            raise ValueError("distance summary needs theta0")
        t0 = np.broadcast_to(np.asarray(theta0, dtype=np.float64), theta.shape)
        ref = np.linalg.norm(theta - t0, axis=1)
        vals = np.linalg.norm(samples - t0[:, None, :], axis=2)
    else:
        raise ValueError(f"unknown summary {summary!r}")
    return SbcRanks(_kernels.count_less(vals, ref) / m, summary)


def nlpd(model, test_pairs):
    """Mean negative log density of the true parameters."""
    theta, x = _xy(test_pairs)
    lp = _log_prob(model, theta, x)
    bad = np.flatnonzero(~np.isfinite(lp))
    if bad.size:
        raise NonFiniteEvaluation(f"non-finite log density at row {bad[0]}", index=int(bad[0]))
    return float(-np.mean(lp))


# --------------------------------------------------------------------------
# kl_cal estimator
# --------------------------------------------------------------------------

@dataclass
class KlcalResult:
    estimate: float
    se: float
    converged: bool
    iterations: int
    psi: np.ndarray = field(default=None)

    def __float__(self):
        return self.estimate


def _fit_logistic(features, labels):
    """Penalized logistic regression by Newton's method.

    Minimizes mean binary cross-entropy plus ``RIDGE * ||psi[1:]||^2``.
    Returns ``(psi, converged, iterations)``.
    """
    n, k = features.shape
    pen = np.full(k, 2.0 * RIDGE)
    pen[0] = 0.0
    psi = np.zeros(k)
    best, best_obj = psi.copy(), math.inf
    for it in range(1, NEWTON_MAX_ITER + 1):
        eta = features @ psi
        p = 0.5 * (1.0 + np.tanh(0.5 * eta))
        grad = features.T @ (p - labels) / n + pen * psi
        obj = float(np.mean(np.logaddexp(0.0, eta) - labels * eta) + RIDGE * np.dot(psi[1:], psi[1:]))
        if obj < best_obj:
            best, best_obj = psi.copy(), obj
        if np.linalg.norm(grad) <= NEWTON_TOL:
            return psi, True, it
        w = p * (1.0 - p)
        hess = (features * w[:, None]).T @ features / n + np.diag(pen)
        hess[0, 0] += 1e-12
        step = np.linalg.solve(hess, grad)
        # backtracking keeps Newton monotone when the data are nearly separable
        t = 1.0
        while t > 1e-8:
            cand = psi - t * step
            e2 = features @ cand
            o2 = float(np.mean(np.logaddexp(0.0, e2) - labels * e2) + RIDGE * np.dot(cand[1:], cand[1:]))
            if o2 <= obj:
                break
            t *= 0.5
        psi = cand
    eta = features @ psi
    p = 0.5 * (1.0 + np.tanh(0.5 * eta))
    grad = features.T @ (p - labels) / n + pen * psi
    if np.linalg.norm(grad) <= NEWTON_TOL:
        return psi, True, NEWTON_MAX_ITER
    return best, False, NEWTON_MAX_ITER


def _standardize(v):
    sd = v.std()
    if not sd > 0:
        return np.zeros_like(v)
    return (v - v.mean()) / sd


def _klcal_fit(u, gamma, v):
    g = _standardize(gamma)
    n = u.shape[0]
    ones = np.ones(n)
    f1 = np.column_stack([ones, u, g])
    f0 = np.column_stack([ones, v, g])
    features = np.vstack([f1, f0])
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    psi, ok, it = _fit_logistic(features, labels)
    return float(np.mean(f1 @ psi)), psi, ok, it


def klcal_from_ranks(u, gamma, rng, n_boot=BOOTSTRAP):
    """Density-ratio estimate of kl_cal from SBC ranks and variance summaries.

    Rows are put in a canonical order first and the fresh uniforms are paired
    with that order, so the result depends only on the set of ``(u, gamma)``
    pairs and the generator state.
    """
    u = np.asarray(u, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    order = np.lexsort((u, gamma))
    u, gamma = u[order], gamma[order]
    n = u.shape[0]
    v = rng.uniform(0.0, 1.0, size=n)
    est, psi, ok, it = _klcal_fit(u, gamma, v)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        boots[b] = _klcal_fit(u[idx], gamma[idx], v[idx])[0]
    se = float(np.std(boots, ddof=1)) if n_boot > 1 else float("nan")
    return KlcalResult(est, se, ok, it, psi)


def klcal_estimate(model, pairs, M, rng, draws=None, n_boot=BOOTSTRAP):
    """kl_cal with the density summary, via a logistic density-ratio fit."""
    theta, x = _xy(pairs)
    if theta.shape[0] < 50:
        raise ValueError("klcal_estimate needs at least 50 pairs")
    if M < 100:
        raise ValueError("klcal_estimate needs M >= 100")
    if draws is None:
        draws = posterior_draws(model, x, M, rng)
    u = sbc_ranks(model, (theta, x), M, "density", draws=draws).u
    gamma = np.sum(np.var(draws[0], axis=1, ddof=1), axis=1)
    return klcal_from_ranks(u, gamma, rng, n_boot)


# --------------------------------------------------------------------------
# analytic oracles on gaussian_linear
# --------------------------------------------------------------------------

def bernoulli_kl(p, q):
    """KL(Bern(p) || Bern(q)) with the convention 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.clip(np.asarray(q, dtype=np.float64), 1e-300, 1 - 1e-16)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(p > 0, p * np.log(p / q), 0.0)
        b = np.where(p < 1, (1 - p) * np.log((1 - p) / (1 - q)), 0.0)
    return a + b


def _gaussian_linear_x(n, rng):
    theta = rng.standard_normal(n)
    return theta + rng.standard_normal(n)


def _model_logq_grid(model, grid, x):
    """log q on a (N, G) grid of theta values, one row per x."""
    n, g = grid.shape
    xs = np.repeat(x.reshape(-1, 1), g, axis=0)
    return _log_prob(model, grid.reshape(-1, 1), xs).reshape(n, g)


def _bisect(model, lo, hi, x, tau, iters=60):
    """Refine roots of ``log q(theta|x) - tau`` bracketed by ``[lo, hi]`` (vectorized)."""
    f_lo = _log_prob(model, lo[:, None], x[:, None]) - tau
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        f_mid = _log_prob(model, mid[:, None], x[:, None]) - tau
        same = np.sign(f_mid) == np.sign(f_lo)
        lo = np.where(same, mid, lo)
        f_lo = np.where(same, f_mid, f_lo)
        hi = np.where(same, hi, mid)
    return 0.5 * (lo + hi)


def _region_intervals(model, x, tau, grid, logq_grid):
    """Super-level set ``{theta : log q >= tau}`` as a list of intervals per x.

    ``logq_grid`` holds ``log q`` on the per-row ``grid``; sign changes are
    refined by bisection.  Regions touching the grid edge are closed there.
    """
    n = x.shape[0]
    inside = logq_grid >= tau[:, None]
    rows, cols = np.nonzero(inside[:, 1:] != inside[:, :-1])
    roots = np.empty(rows.shape[0])
    if rows.size:
        roots = _bisect(model, grid[rows, cols], grid[rows, cols + 1], x[rows], tau[rows])
    out = [[] for _ in range(n)]
    # walk crossings row by row and pair entries with exits
    start = {i: grid[i, 0] for i in range(n) if inside[i, 0]}
    for r, c, root in zip(rows, cols, roots):
        if inside[r, c + 1]:
            start[r] = root
        else:
            out[r].append((start.pop(r, grid[r, 0]), root))
    for r, a in start.items():
        out[r].append((a, grid[r, -1]))
    return out


def _interval_mass(model, x, lo, hi, nodes=64):
    """Model mass of ``[lo_k, hi_k]`` given ``x_k`` for flat arrays of intervals."""
    if hasattr(model, "cdf"):
        return model.cdf(hi[:, None], x[:, None])[:, 0] - model.cdf(lo[:, None], x[:, None])[:, 0]
    t, w = np.polynomial.legendre.leggauss(nodes)
    half = 0.5 * (hi - lo)
    pts = 0.5 * (hi + lo)[:, None] + half[:, None] * t[None, :]
    q = np.exp(_model_logq_grid(model, pts, x))
    return half * (q @ w)


def klcov_oracle_gaussian(model, alphas, n_mc, rng, M=1000, return_details=False, n_grid=4096):
    """KL-based miscoverage on ``gaussian_linear`` for each level in ``alphas``.

    For each simulated ``x`` the model's HPDR is estimated from ``M`` draws
    (nearest-rank threshold), turned into intervals, and its exact posterior
    mass ``p`` compared with its model mass ``Q`` through ``KL(Bern(p)||Bern(Q))``.
    Returns ``{alpha: (estimate, standard_error)}``.
    """
    x = _gaussian_linear_x(n_mc, rng)
    samples, logq = posterior_draws(model, x[:, None], M, rng)
    centers = samples[:, :, 0].mean(axis=1)
    scales = samples[:, :, 0].std(axis=1)
    scales = np.where(scales > 0, scales, 1.0)
    grid = centers[:, None] + scales[:, None] * np.linspace(-8.0, 8.0, n_grid)[None, :]
    logq_grid = _model_logq_grid(model, grid, x)
    sorted_logq = np.sort(logq, axis=1)
    post_sd = math.sqrt(0.5)
    result = {}
    details = {}
    for alpha in np.atleast_1d(alphas):
        k = nearest_rank(float(alpha), M)
        tau = sorted_logq[:, k - 1]
        regions = _region_intervals(model, x, tau, grid, logq_grid)
        owner = np.array([i for i, ivs in enumerate(regions) for _ in ivs], dtype=np.int64)
        lo = np.array([a for ivs in regions for a, _ in ivs], dtype=float)
        hi = np.array([b for ivs in regions for _, b in ivs], dtype=float)
        mean = x[owner] / 2
        p = np.bincount(owner, ndtr((hi - mean) / post_sd) - ndtr((lo - mean) / post_sd), minlength=n_mc)
        qm = np.bincount(owner, _interval_mass(model, x[owner], lo, hi), minlength=n_mc)
        p = np.clip(p, 0.0, 1.0)
        qm = np.clip(qm, 0.0, 1.0)
        kl = bernoulli_kl(p, qm)
        result[float(alpha)] = (float(np.mean(kl)), float(np.std(kl, ddof=1) / math.sqrt(n_mc)))
        details[float(alpha)] = {"p": p, "q": qm, "x": x}
    return (result, details) if return_details else result


def expected_kl_oracle_gaussian(model, n_mc, rng, n_grid=4096):
    """``E_x KL(N(x/2, 1/2) || q(.|x))`` by quadrature; returns ``(estimate, se)``."""
    x = _gaussian_linear_x(n_mc, rng)
    sd = math.sqrt(0.5)
    offsets = np.linspace(-8.0, 8.0, n_grid)
    grid = x[:, None] / 2 + sd * offsets[None, :]
    log_p = -0.5 * offsets ** 2 - 0.5 * math.log(2 * math.pi * 0.5)
    log_q = np.maximum(_model_logq_grid(model, grid, x), math.log(DENSITY_FLOOR))
    integrand = np.exp(log_p)[None, :] * (log_p[None, :] - log_q)
    kl = np.trapezoid(integrand, grid, axis=1)
    return float(np.mean(kl)), float(np.std(kl, ddof=1) / math.sqrt(n_mc))


# --------------------------------------------------------------------------
# combined report
# --------------------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    nlpd: float
    klcal: float
    klcal_se: float
    delta_cov: dict
    curve: CoverageCurve
    metadata: dict

    @property
    def klcal_flagged(self):
        return self.klcal < 0

    def to_json(self):
        doc = {
            "nlpd": self.nlpd,
            "klcal": self.klcal,
            "klcal_se": self.klcal_se,
            "klcal_negative": bool(self.klcal_flagged),
            "delta_cov": {repr(float(a)): v for a, v in self.delta_cov.items()},
            "curve": self.curve.to_dict(),
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def diagnose(model, test_pairs, M=1000, seed=0, alphas=DEFAULT_ALPHAS, delta_levels=(0.05,), summary="density",
             theta0=None, n_boot=BOOTSTRAP):
    """NLPD, coverage curve, Delta_cov and kl_cal from one set of posterior draws."""
    theta, x = _xy(test_pairs)
    d_model = model.d_theta, model.d_x
    if (theta.shape[1], x.shape[1]) != tuple(d_model):
        raise DimError("test pairs do not match the model dimensions")
    rng = np.random.default_rng(seed)
    draws = posterior_draws(model, x, M, rng)
    curve = hpdr_coverage(model, (theta, x), M, alphas, draws=draws)
    value = nlpd(model, (theta, x))
    levels = sorted(set(float(a) for a in delta_levels))
    full = coverage_from_draws(_log_prob(model, theta, x), draws[1], levels)
    dcov = {a: float(d) for a, d in zip(levels, delta_cov(full))}
    if summary == "density":
        u = sbc_ranks(model, (theta, x), M, "density", draws=draws).u
    else:
        u = sbc_ranks(model, (theta, x), M, "distance", theta0=theta0, draws=draws).u
    gamma = np.sum(np.var(draws[0], axis=1, ddof=1), axis=1)
    kl = klcal_from_ranks(u, gamma, rng, n_boot)
    meta = {"n": int(theta.shape[0]), "M": int(M), "seed": int(seed), "summary": summary,
            "klcal_converged": bool(kl.converged)}
    return DiagnosticsReport(value, kl.estimate, kl.se, dcov, curve, meta)
