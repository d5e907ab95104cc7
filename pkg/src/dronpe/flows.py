"""Conditional normalizing flows q(theta | x): MAF and affine coupling.

Both flows are written once against the op functions of :mod:`dronpe.diffcore`
so that the same code evaluates plain arrays, records a reverse-mode graph,
or carries forward-mode input tangents.

The observation ``x`` passes through a fixed standardization layer
``(x - x_mean) / x_std`` before reaching the networks.  Its statistics are
part of the model (and of the checkpoint); input gradients are always taken
with respect to the raw ``x``.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .errors import DimError, InvalidActNorm

__all__ = [
    "MafConfig",
    "CouplingConfig",
    "FlowModel",
    "make_maf",
    "make_coupling",
    "make_flow",
    "log_prob",
    "maf_log_prob",
    "coupling_log_prob",
    "log_prob_graph",
    "base_log_prob",
    "sample",
    "sample_with_base",
    "maf_sample",
    "coupling_sample",
    "maf_conditionals",
    "grad_z_log_prob",
    "grad_z_log_prob_batch",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_text",
    "model_from_text",
]

LOG_2PI = math.log(2.0 * math.pi)
LOG_E_MINUS_1 = math.log(math.e - 1.0)
HEAD_SCALE = 0.01


@dataclass(frozen=True)
class MafConfig:
    """Masked autoregressive flow with one pair of tanh nets per theta coordinate."""

    d_theta: int
    d_x: int
    depth: int = 2
    hidden_width: int = 64

    def __post_init__(self):
        for name in ("d_theta", "d_x", "depth", "hidden_width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")


@dataclass(frozen=True)
class CouplingConfig:
    """Stack of ActNorm + permutation + affine coupling blocks."""

    d_theta: int
    d_x: int
    num_blocks: int = 6
    hidden_width: int = 64
    depth: int = 2
    permutations: tuple = ()

    def __post_init__(self):
        for name in ("d_theta", "d_x", "num_blocks", "hidden_width", "depth"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        perms = self.permutations or tuple(tuple(range(self.d_theta)) for _ in range(self.num_blocks))
        perms = tuple(tuple(int(i) for i in p) for p in perms)
        if len(perms) != self.num_blocks:
            raise ValueError("need one permutation per block")
        for p in perms:
            if sorted(p) != list(range(self.d_theta)):
                raise ValueError(f"{p} is not a permutation of 0..{self.d_theta - 1}")
        object.__setattr__(self, "permutations", perms)

    @property
    def size_a(self):
        return self.d_theta // 2


@dataclass(frozen=True)
class FlowModel:
    """Architecture descriptor plus flat parameter vector."""

    kind: str
    config: object
    params: np.ndarray
    x_mean: np.ndarray = field(default=None)
    x_std: np.ndarray = field(default=None)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("maf", "coupling"):
            raise ValueError(f"unknown flow kind {self.kind!r}")
        params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        expected = param_count(self.kind, self.config)
        if params.shape[0] != expected:
            raise DimError(f"parameter vector has length {params.shape[0]}, expected {expected}")
        object.__setattr__(self, "params", params)
        d_x = self.config.d_x
        mean = np.zeros(d_x) if self.x_mean is None else np.asarray(self.x_mean, dtype=np.float64)
        std = np.ones(d_x) if self.x_std is None else np.asarray(self.x_std, dtype=np.float64)
        if mean.shape != (d_x,) or std.shape != (d_x,):
            raise DimError("standardization statistics must have length d_x")
        if np.any(std <= 0):
            raise ValueError("x_std entries must be positive")
        object.__setattr__(self, "x_mean", mean)
        object.__setattr__(self, "x_std", std)

    @property
    def d_theta(self):
        return self.config.d_theta

    @property
    def d_x(self):
        return self.config.d_x

    def with_params(self, params):
        return replace(self, params=np.array(params, dtype=np.float64))

    def with_standardization(self, x):
        """Copy of the model whose x-standardization uses the rows of ``x``."""
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return replace(self, x_mean=mean, x_std=std)


# --------------------------------------------------------------------------
# parameter layout
# --------------------------------------------------------------------------

def _mlp_layout(n_in, width, depth, n_out):
    layout = []
    fan = n_in
    for _ in range(depth):
        layout.append(((fan, width), "w"))
        layout.append(((width,), "b"))
        fan = width
    layout.append(((width, n_out), "head"))
    layout.append(((n_out,), "b"))
    return layout


def _layout(kind, cfg):
    if kind == "maf":
        layout = []
        for i in range(cfg.d_theta):
            n_in = i + cfg.d_x
            layout += _mlp_layout(n_in, cfg.hidden_width, cfg.depth, 1)  # mean net
            layout += _mlp_layout(n_in, cfg.hidden_width, cfg.depth, 1)  # scale net
        return layout
    layout = []
    a = cfg.size_a
    for _ in range(cfg.num_blocks):
        layout.append(((cfg.d_theta,), "alpha"))
        layout.append(((cfg.d_theta,), "beta"))
        if a > 0:
            layout += _mlp_layout(cfg.d_theta - a + cfg.d_x, cfg.hidden_width, cfg.depth, 2 * a)
    return layout


def param_count(kind, cfg):
    return int(sum(int(np.prod(shape)) for shape, _ in _layout(kind, cfg)))


def _init_params(kind, cfg, rng, zeros=False):
    chunks = []
    for shape, role in _layout(kind, cfg):
        if role == "alpha":
            chunks.append(np.ones(shape))
        elif zeros or role in ("b", "beta"):
            chunks.append(np.zeros(shape))
        else:
            bound = 1.0 / math.sqrt(shape[0])
            w = rng.uniform(-bound, bound, size=shape)
            if role == "head":
                w = w * HEAD_SCALE
            chunks.append(w)
    return np.concatenate([c.reshape(-1) for c in chunks]) if chunks else np.zeros(0)


def _cyclic_permutations(d, blocks, rng):
    perms = []
    for _ in range(blocks):
        shift = int(rng.integers(1, d)) if d > 1 else 0
        perms.append(tuple(int(i) for i in np.roll(np.arange(d), -shift)))
    return tuple(perms)


def make_maf(d_theta, d_x, depth=2, hidden_width=64, seed=0, zeros=False):
    """MAF with default initialization (or all parameters zero)."""
    cfg = MafConfig(d_theta, d_x, depth, hidden_width)
    rng = np.random.default_rng(seed)
    return FlowModel("maf", cfg, _init_params("maf", cfg, rng, zeros), seed=seed)


def make_coupling(d_theta, d_x, num_blocks=6, hidden_width=64, depth=2, seed=0, zeros=False,
                  permutations=None):
    """Coupling flow; ``zeros=True`` gives the identity configuration (alpha=1, all else 0)."""
    rng = np.random.default_rng(seed)
    if permutations is None:
        permutations = _cyclic_permutations(d_theta, num_blocks, rng)
    cfg = CouplingConfig(d_theta, d_x, num_blocks, hidden_width, depth, tuple(permutations))
    return FlowModel("coupling", cfg, _init_params("coupling", cfg, rng, zeros), seed=seed)


def make_flow(kind, d_theta, d_x, seed=0, hidden_width=64, depth=2, num_blocks=6, x_ref=None):
    """Construct a freshly initialized flow, optionally standardizing x on ``x_ref``."""
    if kind == "maf":
        model = make_maf(d_theta, d_x, depth, hidden_width, seed)
    elif kind == "coupling":
        model = make_coupling(d_theta, d_x, num_blocks, hidden_width, depth, seed)
    else:
        raise ValueError(f"unknown flow kind {kind!r}")
    if x_ref is not None and len(x_ref) > 0:
        model = model.with_standardization(x_ref)
    return model


# --------------------------------------------------------------------------
# shared network pieces
# --------------------------------------------------------------------------

class _Cursor:
    def __init__(self, pieces):
        self.pieces = pieces
        self.pos = 0

    def take(self, n=1):
        out = self.pieces[self.pos:self.pos + n]
        self.pos += n
        return out if n > 1 else out[0]


def _mlp(inp, cursor, depth):
    h = inp
    for _ in range(depth):
        w, b = cursor.take(2)
        h = dc.tanh(dc.add(dc.matmul(h, w), b))
    w, b = cursor.take(2)
    return dc.add(dc.matmul(h, w), b)


def _pieces(model, phi):
    return _Cursor(dc.split(phi, [shape for shape, _ in _layout(model.kind, model.config)]))


def _standardize(model, x):
    return dc.mul(dc.sub(x, model.x_mean), 1.0 / model.x_std)


def _cols(a, idx):
    return dc.take(a, np.asarray(idx, dtype=np.intp), -1)


def _coupling_scale(raw):
    return dc.softplus(dc.add(dc.asinh(raw), LOG_E_MINUS_1))


def _check_alpha(alpha):
    if np.any(dc.value_of(alpha) == 0.0):
        raise InvalidActNorm("ActNorm scale has a zero entry")


def log_prob_graph(model, phi, theta, x):
    """Per-row log density for batched ``theta (B, d_theta)`` and ``x (B, d_x)``.

    ``phi``, ``theta`` and ``x`` may be arrays, graph nodes or duals.
    """
    cfg = model.config
    cur = _pieces(model, phi)
    xs = _standardize(model, x)
    d = cfg.d_theta
    total = None
    if model.kind == "maf":
        quad = None
        logsig = None
        for i in range(d):
            inp = xs if i == 0 else dc.concat([_cols(theta, range(i)), xs])
            mu = _mlp(inp, cur, cfg.depth)
            sig = dc.softplus(_mlp(inp, cur, cfg.depth))
            u = dc.mul(dc.sub(_cols(theta, [i]), mu), dc.reciprocal(sig))
            q = dc.square(u)
            ls = dc.log(sig)
            quad = q if quad is None else dc.add(quad, q)
            logsig = ls if logsig is None else dc.add(logsig, ls)
        total = dc.sub(dc.mul(-0.5, quad), logsig)
        return dc.sub(dc.sum(total, -1), 0.5 * d * LOG_2PI)

    a = cfg.size_a
    h = theta
    logdet = None
    for perm in cfg.permutations:
        alpha, beta = cur.take(2)
        _check_alpha(alpha)
        y = dc.add(dc.mul(alpha, h), beta)
        y = _cols(y, perm)
        la = dc.mul(0.5, dc.sum(dc.log(dc.square(alpha))))
        logdet = la if logdet is None else dc.add(logdet, la)
        if a == 0:
            h = y
            continue
        ya, yb = _cols(y, range(a)), _cols(y, range(a, d))
        out = _mlp(dc.concat([yb, xs]), cur, cfg.depth)
        mu, raw = _cols(out, range(a)), _cols(out, range(a, 2 * a))
        sig = _coupling_scale(raw)
        h = dc.concat([dc.add(dc.mul(sig, ya), mu), yb])
        logdet = dc.add(logdet, dc.sum(dc.log(sig), -1))
    base = dc.sub(dc.mul(-0.5, dc.sum(dc.square(h), -1)), 0.5 * d * LOG_2PI)
    return dc.add(base, logdet)


def _as_batch(model, theta, x):
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    single = theta.ndim == 1 and x.ndim == 1
    theta2 = np.atleast_2d(theta)
    x2 = np.atleast_2d(x)
    if theta2.shape[-1] != model.d_theta:
        raise DimError(f"theta has {theta2.shape[-1]} coordinates, model expects {model.d_theta}")
    if x2.shape[-1] != model.d_x:
        raise DimError(f"x has {x2.shape[-1]} coordinates, model expects {model.d_x}")
    if theta2.ndim != 2 or x2.ndim != 2:
        raise DimError("theta and x must be vectors or 2-D row batches")
    n = max(theta2.shape[0], x2.shape[0])
    if theta2.shape[0] not in (1, n) or x2.shape[0] not in (1, n):
        raise DimError("theta and x batches have different lengths")
    return np.broadcast_to(theta2, (n, model.d_theta)), np.broadcast_to(x2, (n, model.d_x)), single


def log_prob(model, theta, x, chunk=65536):
    """log q(theta | x) for one pair (returns float) or row batches (returns array)."""
    theta2, x2, single = _as_batch(model, theta, x)
    out = np.empty(theta2.shape[0])
    for s in range(0, theta2.shape[0], chunk):
        out[s:s + chunk] = log_prob_graph(model, model.params, theta2[s:s + chunk], x2[s:s + chunk])
    return float(out[0]) if single else out


def maf_log_prob(model, theta, x):
    if model.kind != "maf":
        raise TypeError("model is not a MAF")
    return log_prob(model, theta, x)


def coupling_log_prob(model, theta, x):
    if model.kind != "coupling":
        raise TypeError("model is not a coupling flow")
    return log_prob(model, theta, x)


def base_log_prob(u):
    """Standard-normal log density of the rows of ``u``."""
    u = np.asarray(u, dtype=np.float64)
    return -0.5 * np.sum(u * u, axis=-1) - 0.5 * u.shape[-1] * LOG_2PI


def maf_conditionals(model, theta, x):
    """Per-coordinate MAF shift and scale ``(mu, sigma)``, each of shape (B, d_theta)."""
    theta2, x2, _ = _as_batch(model, theta, x)
    cfg = model.config
    cur = _pieces(model, model.params)
    xs = _standardize(model, x2)
    mus, sigs = [], []
    for i in range(cfg.d_theta):
        inp = xs if i == 0 else np.concatenate([theta2[:, :i], xs], axis=-1)
        mus.append(_mlp(inp, cur, cfg.depth)[:, 0])
        sigs.append(dc.softplus(_mlp(inp, cur, cfg.depth))[:, 0])
    return np.stack(mus, axis=1), np.stack(sigs, axis=1)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def sample_with_base(model, x, u):
    """Push base draws ``u (B, d_theta)`` through the inverse flow.

    Returns ``(theta, logdet)`` where ``logdet`` is the log-determinant of the
    forward map theta -> u, so ``log q(theta|x) = base_log_prob(u) + logdet``.
    """
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if u.shape[-1] != model.d_theta:
        raise DimError("base draws have the wrong width")
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x2.shape[-1] != model.d_x:
        raise DimError(f"x has {x2.shape[-1]} coordinates, model expects {model.d_x}")
    x2 = np.broadcast_to(x2, (u.shape[0], model.d_x))
    cfg = model.config
    cur = _pieces(model, model.params)
    xs = _standardize(model, x2)
    d = cfg.d_theta
    if model.kind == "maf":
        theta = np.zeros_like(u)
        logdet = np.zeros(u.shape[0])
        for i in range(d):
            inp = xs if i == 0 else np.concatenate([theta[:, :i], xs], axis=-1)
            mu = _mlp(inp, cur, cfg.depth)[:, 0]
            sig = dc.softplus(_mlp(inp, cur, cfg.depth))[:, 0]
            theta[:, i] = mu + sig * u[:, i]
            logdet -= np.log(sig)
        return theta, logdet

    a = cfg.size_a
    blocks = []
    for perm in cfg.permutations:
        alpha, beta = cur.take(2)
        net = None
        if a > 0:
            net = cur.take(2 * cfg.depth + 2)
        blocks.append((np.asarray(perm), alpha, beta, net))
    h = u.copy()
    logdet = np.zeros(u.shape[0])
    for perm, alpha, beta, net in reversed(blocks):
        _check_alpha(alpha)
        if a > 0:
            ua, yb = h[:, :a], h[:, a:]
            out = _mlp(np.concatenate([yb, xs], axis=-1), _Cursor(list(net)), cfg.depth)
            mu, sig = out[:, :a], _coupling_scale(out[:, a:])
            h = np.concatenate([(ua - mu) / sig, yb], axis=-1)
            logdet += np.sum(np.log(sig), axis=-1)
        y = np.empty_like(h)
        y[:, perm] = h
        h = (y - beta) / alpha
        logdet += np.sum(np.log(np.abs(alpha)))
    return h, logdet


def sample(model, x, count, rng, return_base=False):
    """Draw ``count`` samples from q(. | x) for a single observation ``x``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    u = rng.standard_normal((count, model.d_theta))
    theta, logdet = sample_with_base(model, x, u)
    if return_base:
        return theta, u, logdet
    return theta


def maf_sample(model, x, count, rng):
    if model.kind != "maf":
        raise TypeError("model is not a MAF")
    return sample(model, x, count, rng)


def coupling_sample(model, x, count, rng):
    if model.kind != "coupling":
        raise TypeError("model is not a coupling flow")
    return sample(model, x, count, rng)


# --------------------------------------------------------------------------
# input gradients
# --------------------------------------------------------------------------

def _split_z(model, z):
    d = model.d_theta
    return _cols(z, range(d)), _cols(z, range(d, d + model.d_x))


def grad_z_log_prob(model, theta, x):
    """Gradient of log q(theta|x) with respect to z = (theta, x)."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if theta.shape[0] != model.d_theta or x.shape[0] != model.d_x:
        raise DimError("theta/x do not match the model dimensions")
    z = np.concatenate([theta, x])

    def f(zd):
        zb = dc.Dual(zd.primal[None, :], zd.tangent[:, None, :])
        th, xx = _split_z(model, zb)
        out = log_prob_graph(model, model.params, th, xx)
        return dc.Dual(out.primal[0], None if out.tangent is None else out.tangent[:, 0])

    return dc.input_grad(f, z, dim=model.d_theta + model.d_x)


def grad_z_log_prob_batch(model, theta, x):
    """Row-wise gradients of log q with respect to z, shape (B, d_theta + d_x)."""
    theta2, x2, _ = _as_batch(model, theta, x)
    z = np.concatenate([theta2, x2], axis=1)

    def f(zd):
        th, xx = _split_z(model, zd)
        return log_prob_graph(model, model.params, th, xx)

    return dc.input_grads(f, z)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _fmt(values):
    return "[" + ",".join(repr(float(v)) for v in np.asarray(values).reshape(-1)) + "]"


def checkpoint_text(model):
    cfg = model.config
    config = {"d_theta": cfg.d_theta, "d_x": cfg.d_x, "depth": cfg.depth, "hidden_width": cfg.hidden_width}
    perms = []
    if model.kind == "coupling":
        config["num_blocks"] = cfg.num_blocks
        perms = [list(p) for p in cfg.permutations]
    head = {"kind": model.kind, "config": config, "permutations": perms, "seed": int(model.seed)}
    lines = ["{"]
    for key, value in head.items():
        lines.append(f"  {json.dumps(key)}: {json.dumps(value, sort_keys=True)},")
    lines.append(f'  "x_mean": {_fmt(model.x_mean)},')
    lines.append(f'  "x_std": {_fmt(model.x_std)},')
    lines.append(f'  "params": {_fmt(model.params)}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def model_from_text(text):
    doc = json.loads(text)
    c = doc["config"]
    if doc["kind"] == "maf":
        cfg = MafConfig(c["d_theta"], c["d_x"], c["depth"], c["hidden_width"])
    else:
        cfg = CouplingConfig(c["d_theta"], c["d_x"], c["num_blocks"], c["hidden_width"], c["depth"],
                             tuple(tuple(p) for p in doc["permutations"]))
    return FlowModel(doc["kind"], cfg, np.array(doc["params"], dtype=np.float64),
                     np.array(doc["x_mean"], dtype=np.float64), np.array(doc["x_std"], dtype=np.float64),
                     int(doc.get("seed", 0)))


def save_checkpoint(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(checkpoint_text(model))


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_text(fh.read())
