"""Selection of the DRO radius by 1-D Bayesian optimization over log(epsilon)."""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from . import diagnostics
from .errors import DomainError
from .flows import make_flow
from .objectives import TrainConfig, train

__all__ = [
    "CRITERIA",
    "EpsSearchConfig",
    "EpsSearchResult",
    "conservative_criterion",
    "gp_propose",
    "split_indices",
    "select_epsilon",
]

CRITERIA = ("klcal", "klcal_minus_gamma_eps", "nlpd", "abs_miscoverage")
GRID_POINTS = 512
NOISE = 1e-6
LENGTHSCALES = np.logspace(-2, 1, 40)


@dataclass(frozen=True)
class EpsSearchConfig:
    log_lo: float = math.log(0.001)
    log_hi: float = math.log(10.0)
    budget: int = 10
    val_fraction: float = 0.1
    criterion: str = "klcal"
    gamma: float = 0.0
    alpha: float = 0.05
    summary: str = "density"
    M: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.log_lo < self.log_hi:
            raise ValueError("log_lo must be below log_hi")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    @property
    def bounds(self):
        return (self.log_lo, self.log_hi)


@dataclass
class EpsSearchResult:
    points: list
    eps_star: float
    model: object = None
    trace: object = None
    train_index: np.ndarray = None
    val_index: np.ndarray = None
    fallbacks: int = 0
    details: list = field(default_factory=list)

    @property
    def log_eps_star(self):
        return math.log(self.eps_star)

    def to_json(self):
        doc = {
            "eps_star": self.eps_star,
            "log_eps_star": self.log_eps_star,
            "evaluations": [
                {"log_eps": p, "epsilon": math.exp(p), "value": (v if math.isfinite(v) else None)}
                for p, v in self.points
            ],
            "random_fallbacks": self.fallbacks,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def conservative_criterion(klcal, epsilon, gamma, bounds):
    """``klcal - gamma * (log eps - log_lo) / (log_hi - log_lo)``."""
    lo, hi = bounds
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    le = math.log(epsilon)
    if le < lo - 1e-12 or le > hi + 1e-12:
        raise DomainError(f"epsilon={epsilon} is outside [{math.exp(lo)}, {math.exp(hi)}]")
    return klcal - gamma * (le - lo) / (hi - lo)


# --------------------------------------------------------------------------
# Gaussian-process expected improvement
# --------------------------------------------------------------------------

def _rbf(a, b, ell):
    d = a[:, None] - b[None, :]
    return np.exp(-0.5 * (d / ell) ** 2)


def _log_marginal(x, y, ell):
    k = _rbf(x, x, ell) + NOISE * np.eye(x.shape[0])
    chol = np.linalg.cholesky(k)
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y))
    return -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(chol))))


def _gp_posterior(x, y, grid, ell):
    k = _rbf(x, x, ell) + NOISE * np.eye(x.shape[0])
    chol = np.linalg.cholesky(k)
    ks = _rbf(x, grid, ell)
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y))
    mu = ks.T @ alpha
    v = np.linalg.solve(chol, ks)
    var = np.maximum(1.0 - np.sum(v * v, axis=0), 0.0)
    return mu, np.sqrt(var)


def expected_improvement(mu, sd, best):
    """EI for minimization with posterior mean ``mu`` and standard deviation ``sd``."""
    imp = best - mu
    out = np.maximum(imp, 0.0)
    pos = sd > 0
    z = imp[pos] / sd[pos]
    out[pos] = imp[pos] * ndtr(z) + sd[pos] * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    return out


def gp_propose(observed, bounds, rng=None, return_info=False):
    """Next log-epsilon to evaluate by GP expected improvement on a 512-point grid.

    ``observed`` is a sequence of ``(point, value)``.  Non-finite values are
    replaced by the worst finite value.  Grid points already evaluated are
    skipped; ties go to the smallest point.  If the covariance cannot be
    factorized the proposal is uniform on ``bounds`` and flagged.
    """
    lo, hi = bounds
    obs = [(float(p), float(v)) for p, v in observed]
    if not obs:
        raise ValueError("gp_propose needs at least one observation")
    rng = rng if rng is not None else np.random.default_rng(0)
    pts = np.array([p for p, _ in obs])
    vals = np.array([v for _, v in obs])
    grid = np.linspace(lo, hi, GRID_POINTS)
    taken = np.any(np.abs(grid[:, None] - pts[None, :]) <= 1e-12 * max(1.0, hi - lo), axis=1)
    finite = np.isfinite(vals)
    info = {"fallback": False, "lengthscale": None}

    def fallback(reason):
        info["fallback"] = True
        info["reason"] = reason
        p = float(rng.uniform(lo, hi))
        return (p, info) if return_info else p

    if not finite.any():
        return fallback("no finite observations")
    vals = np.where(finite, vals, vals[finite].max())
    sd = vals.std()
    y = (vals - vals.mean()) / sd if sd > 0 else np.zeros_like(vals)
    x = (pts - lo) / (hi - lo)
    g = (grid - lo) / (hi - lo)
    try:
        scores = np.array([_log_marginal(x, y, ell) for ell in LENGTHSCALES])
        # ties (e.g. a single observation) go to the smoothest fit
        ell = float(LENGTHSCALES[np.flatnonzero(scores >= scores.max() - 1e-9)[-1]])
        mu, sdv = _gp_posterior(x, y, g, ell)
    except np.linalg.LinAlgError:
        return fallback("covariance not positive definite")
    info["lengthscale"] = ell
    ei = expected_improvement(mu, sdv, float(y.min()))
    ei[taken] = -np.inf
    if not np.isfinite(ei).any():
        return fallback("grid exhausted")
    point = float(grid[int(np.argmax(ei))])
    return (point, info) if return_info else point


# --------------------------------------------------------------------------
# the search loop
# --------------------------------------------------------------------------

def split_indices(n, val_fraction, seed):
    """Disjoint sorted ``(train, val)`` index arrays from a seeded permutation."""
    n_val = max(1, int(round(val_fraction * n)))
    if n_val >= n:
        raise ValueError("dataset too small for a validation split")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _criterion_value(model, val, search, epsilon, rng, theta0=None):
    if search.criterion == "nlpd":
        return diagnostics.nlpd(model, val)
    if search.criterion == "abs_miscoverage":
        curve = diagnostics.hpdr_coverage(model, val, search.M, [search.alpha], rng)
        return float(diagnostics.delta_cov(curve)[0])
    draws = diagnostics.posterior_draws(model, val.x, search.M, rng)
    if search.summary == "distance":
        u = diagnostics.sbc_ranks(model, val, search.M, "distance", theta0=theta0, draws=draws).u
    else:
        u = diagnostics.sbc_ranks(model, val, search.M, "density", draws=draws).u
    gamma = np.sum(np.var(draws[0], axis=1, ddof=1), axis=1)
    kl = diagnostics.klcal_from_ranks(u, gamma, rng).estimate
    if search.criterion == "klcal_minus_gamma_eps":
        return conservative_criterion(kl, epsilon, search.gamma, search.bounds)
    return kl


def _seed_points(search):
    mid = 0.5 * (search.log_lo + search.log_hi)
    return [mid, search.log_lo, search.log_hi]


def select_epsilon(dataset=None, flow=None, train_config=None, search=None, evaluate=None, refit=True,
                   theta0=None):
    """Choose epsilon by minimizing a validation criterion over log(epsilon).

    Parameters
    ----------
    dataset : PairDataset
        Full dataset; split 90/10 by a seeded permutation.
    flow : dict
        Keyword arguments for :func:`dronpe.flows.make_flow` (``kind``, widths...).
    train_config : TrainConfig
        Settings for every inner training run; ``method`` is forced to ``dro``.
    search : EpsSearchConfig
    evaluate : callable, optional
        ``evaluate(log_eps) -> value`` replacing train-and-validate (used to
        inject synthetic criterion surfaces).
    refit : bool
        Retrain on the full dataset with the selected epsilon.

    Returns
    -------
    EpsSearchResult
    """
    search = search or EpsSearchConfig()
    train_config = replace(train_config or TrainConfig(), method="dro")
    rng = np.random.default_rng(search.seed)
    train_idx = val_idx = None
    if evaluate is None:
        if dataset is None:
            raise ValueError("need a dataset or an evaluate callback")
        train_idx, val_idx = split_indices(len(dataset), search.val_fraction, search.seed)
        assert np.intersect1d(train_idx, val_idx).size == 0
        tr, val = dataset.subset(train_idx), dataset.subset(val_idx)
        flow_kw = dict(flow or {})
        kind = flow_kw.pop("kind", "coupling")
        standardize = flow_kw.pop("standardize", True)

        def evaluate(log_eps):
            eps = math.exp(log_eps)
            model = make_flow(kind, tr.d_theta, tr.d_x, x_ref=tr.x if standardize else None, **flow_kw)
            fitted, trace = train(model, tr, replace(train_config, epsilon=eps))
            if trace.aborted:
                return math.inf
            try:
                value = _criterion_value(fitted, val, search, eps, np.random.default_rng(search.seed + 1), theta0)
            except FloatingPointError:
                return math.inf
            return float(value) if np.isfinite(value) else math.inf

    points = []
    fallbacks = 0
    queue = _seed_points(search)
    for _ in range(search.budget):
        if queue:
            p = queue.pop(0)
        else:
            p, info = gp_propose(points, search.bounds, rng, return_info=True)
            fallbacks += int(info["fallback"])
        try:
            v = float(evaluate(p))
        except FloatingPointError:
            v = math.inf
        points.append((float(p), v if math.isfinite(v) else math.inf))

    # argmin, ties to the smallest epsilon
    best = min(points, key=lambda pv: (pv[1], pv[0]))
    eps_star = math.exp(best[0])
    result = EpsSearchResult(points, eps_star, train_index=train_idx, val_index=val_idx, fallbacks=fallbacks)
    if refit and dataset is not None:
        flow_kw = dict(flow or {})
        kind = flow_kw.pop("kind", "coupling")
        standardize = flow_kw.pop("standardize", True)
        model = make_flow(kind, dataset.d_theta, dataset.d_x, x_ref=dataset.x if standardize else None, **flow_kw)
        result.model, result.trace = train(model, dataset, replace(train_config, epsilon=eps_star))
    return result
