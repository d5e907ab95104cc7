"""Benchmark simulators and the conjugate Gaussian oracle task.

Each task is split into a random part (prior draw and noise draw, taken from
a per-row random stream) and a deterministic part that maps ``(theta,
noise)`` to ``x`` for a whole batch at once.  Row ``i`` of a dataset with
seed ``s`` always uses the stream ``default_rng([s, i])``, so generating rows
in any order or in parallel gives the same dataset.
"""

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import _kernels
from .errors import DimError, SimWarning

__all__ = [
    "Task",
    "TASKS",
    "PairDataset",
    "get_task",
    "sample_prior",
    "prior_log_prob",
    "simulate",
    "simulate_batch",
    "generate_dataset",
    "gaussian_linear_posterior",
    "lv_rhs",
    "lv_trajectory",
    "save_dataset",
    "load_dataset",
    "dataset_text",
]

LV_X0, LV_Y0 = 30.0, 1.0
LV_T_END = 20.0
LV_DT = 0.01
LV_N_OBS = 10
LV_NOISE = 0.1
LV_LOC = np.array([-0.125, -3.0, -0.125, -3.0])
LV_SCALE = 0.5

IK_STD = np.array([0.25, 0.5, 0.5, 0.5])
IK_LENGTHS = (0.5, 0.5, 1.0)

SLCP_JITTER = 1e-12


@dataclass(frozen=True)
class Task:
    name: str
    d_theta: int
    d_x: int


TASKS = {
    "two_moons": Task("two_moons", 2, 2),
    "slcp": Task("slcp", 5, 8),
    "lotka_volterra": Task("lotka_volterra", 4, 20),
    "inverse_kinematics": Task("inverse_kinematics", 4, 2),
    "gaussian_linear": Task("gaussian_linear", 1, 1),
}


def get_task(task):
    if isinstance(task, Task):
        return task
    try:
        return TASKS[task]
    except KeyError:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}") from None


@dataclass
class PairDataset:
    """Simulated pairs; row ``i`` is ``(theta[i], x[i])``."""

    theta: np.ndarray
    x: np.ndarray
    task: str = ""
    seed: int = 0
    sim_warnings: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.theta.ndim != 2 or self.x.ndim != 2:
            raise DimError("theta and x must be 2-D arrays")
        if self.theta.shape[0] != self.x.shape[0]:
            raise DimError("theta and x have different row counts")

    def __len__(self):
        return self.theta.shape[0]

    @property
    def d_theta(self):
        return self.theta.shape[1]

    @property
    def d_x(self):
        return self.x.shape[1]

    @property
    def z(self):
        return np.concatenate([self.theta, self.x], axis=1)

    def subset(self, index):
        index = np.asarray(index)
        return PairDataset(self.theta[index], self.x[index], self.task, self.seed, 0, dict(self.meta))


# --------------------------------------------------------------------------
# priors
# --------------------------------------------------------------------------

def _prior_row(name, rng):
    if name == "two_moons":
        return rng.uniform(-1.0, 1.0, size=2)
    if name == "slcp":
        return rng.uniform(-3.0, 3.0, size=5)
    if name == "lotka_volterra":
        return np.exp(LV_LOC + LV_SCALE * rng.standard_normal(4))
    if name == "inverse_kinematics":
        return IK_STD * rng.standard_normal(4)
    return rng.standard_normal(1)


def sample_prior(task, n, rng):
    """``n`` i.i.d. prior draws as an ``(n, d_theta)`` matrix."""
    t = get_task(task)
    if n < 1:
        raise ValueError("n must be at least 1")
    name = t.name
    if name == "two_moons":
        return rng.uniform(-1.0, 1.0, size=(n, 2))
    if name == "slcp":
        return rng.uniform(-3.0, 3.0, size=(n, 5))
    if name == "lotka_volterra":
        return np.exp(LV_LOC + LV_SCALE * rng.standard_normal((n, 4)))
    if name == "inverse_kinematics":
        return IK_STD * rng.standard_normal((n, 4))
    return rng.standard_normal((n, 1))


def prior_log_prob(task, theta):
    """Closed-form prior log density per row; ``-inf`` outside the support."""
    t = get_task(task)
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    name = t.name
    if name in ("two_moons", "slcp"):
        half = 1.0 if name == "two_moons" else 3.0
        inside = np.all(np.abs(theta) <= half, axis=1)
        return np.where(inside, -t.d_theta * math.log(2.0 * half), -np.inf)
    if name == "lotka_volterra":
        out = np.full(theta.shape[0], -np.inf)
        pos = np.all(theta > 0, axis=1)
        lt = np.log(theta[pos])
        z = (lt - LV_LOC) / LV_SCALE
        out[pos] = np.sum(-0.5 * z * z - math.log(LV_SCALE) - 0.5 * math.log(2 * math.pi) - lt, axis=1)
        return out
    if name == "inverse_kinematics":
        z = theta / IK_STD
        return np.sum(-0.5 * z * z - np.log(IK_STD) - 0.5 * math.log(2 * math.pi), axis=1)
    return -0.5 * np.sum(theta * theta, axis=1) - 0.5 * t.d_theta * math.log(2 * math.pi)


# --------------------------------------------------------------------------
# noise and deterministic maps
# --------------------------------------------------------------------------

def _noise_row(name, rng):
    if name == "two_moons":
        alpha = rng.uniform(-math.pi / 2, math.pi / 2)
        r = rng.normal(0.1, 0.01)
        return np.array([alpha, r])
    if name == "slcp":
        return rng.standard_normal(8)
    if name == "lotka_volterra":
        return rng.standard_normal(2 * LV_N_OBS)
    if name == "inverse_kinematics":
        return np.zeros(0)
    return rng.standard_normal(1)


def lv_rhs(theta, state):
    """Lotka-Volterra vector field at ``state = (X, Y)``."""
    a, b, c, d = theta
    X, Y = state
    return np.array([a * X - b * X * Y, -c * Y + d * X * Y])


def lv_trajectory(theta, dt=LV_DT):
    """Noise-free populations at the observation times, shape ``(n, 2, 10)``.

    Returns ``(states, clamped)`` with the per-row count of clamped steps.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    n_steps = int(round(LV_T_END / dt))
    stride = n_steps // LV_N_OBS
    return _kernels.lv_observe(theta, LV_X0, LV_Y0, dt, n_steps, stride)


def _apply(name, theta, noise):
    """Deterministic part of each simulator, vectorized over rows."""
    if name == "two_moons":
        alpha, r = noise[:, 0], noise[:, 1]
        t1, t2 = theta[:, 0], theta[:, 1]
        x1 = -np.abs(t1 + t2) / math.sqrt(2.0) + r * np.cos(alpha) + 0.25
        x2 = (-t1 + t2) / 2.0 + r * np.sin(alpha)
        return np.stack([x1, x2], axis=1), 0
    if name == "slcp":
        m1, m2 = theta[:, 0], theta[:, 1]
        s1, s2 = theta[:, 2] ** 2, theta[:, 3] ** 2
        rho = np.tanh(theta[:, 4])
        c11 = s1 * s1 + SLCP_JITTER
        c12 = rho * s1 * s2
        c22 = s2 * s2 + SLCP_JITTER
        l11 = np.sqrt(c11)
        l21 = c12 / l11
        l22 = np.sqrt(np.maximum(c22 - l21 * l21, 0.0))
        e = noise.reshape(-1, 4, 2)
        x1 = m1[:, None] + l11[:, None] * e[:, :, 0]
        x2 = m2[:, None] + l21[:, None] * e[:, :, 0] + l22[:, None] * e[:, :, 1]
        return np.stack([x1, x2], axis=2).reshape(-1, 8), 0
    if name == "lotka_volterra":
        states, clamped = lv_trajectory(theta)
        x = np.exp(np.log(states.reshape(-1, 2 * LV_N_OBS)) + LV_NOISE * noise)
        return x, int(np.count_nonzero(clamped))
    if name == "inverse_kinematics":
        l1, l2, l3 = IK_LENGTHS
        a1 = theta[:, 1]
        a2 = a1 + theta[:, 2]
        a3 = a2 + theta[:, 3]
        x1 = l1 * np.sin(a1) + l2 * np.sin(a2) + l3 * np.sin(a3) + theta[:, 0]
        x2 = l1 * np.cos(a1) + l2 * np.cos(a2) + l3 * np.cos(a3)
        return np.stack([x1, x2], axis=1), 0
    return theta + noise, 0


def _check_theta(t, theta):
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    if theta.shape[1] != t.d_theta:
        raise DimError(f"{t.name} expects theta of width {t.d_theta}")
    if t.name == "lotka_volterra" and np.any(theta <= 0):
        raise ValueError("lotka_volterra parameters must be positive")
    return theta


def simulate_batch(task, theta, noise):
    """Map parameters and pre-drawn noise rows to observations.

    Returns ``(x, n_clamped_rows)``; emits :class:`SimWarning` when the ODE
    state had to be clamped.
    """
    t = get_task(task)
    theta = _check_theta(t, theta)
    noise = np.asarray(noise, dtype=np.float64).reshape(theta.shape[0], -1)
    x, clamped = _apply(t.name, theta, noise)
    if clamped:
        warnings.warn(f"{clamped} simulation(s) had their state clamped to {_kernels.STATE_FLOOR}", SimWarning,
                      stacklevel=2)
    return x, clamped


def simulate(task, theta, rng, noise=None):
    """One draw of ``x | theta``; ``noise`` overrides the random draw when given."""
    t = get_task(task)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if noise is None:
        noise = _noise_row(t.name, rng)
    x, _ = simulate_batch(t, theta[None, :], np.asarray(noise, dtype=np.float64)[None, :])
    return x[0]


def generate_dataset(task, n, seed):
    """``n`` joint draws; row ``i`` uses the stream ``default_rng([seed, i])``."""
    t = get_task(task)
    if n < 0:
        raise ValueError("n must be nonnegative")
    theta = np.empty((n, t.d_theta))
    noise_width = {"two_moons": 2, "slcp": 8, "lotka_volterra": 2 * LV_N_OBS, "inverse_kinematics": 0}.get(t.name, 1)
    noise = np.empty((n, noise_width))
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        theta[i] = _prior_row(t.name, rng)
        noise[i] = _noise_row(t.name, rng)
    if n == 0:
        return PairDataset(theta, np.empty((0, t.d_x)), t.name, seed, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SimWarning)
        x, clamped = simulate_batch(t, theta, noise)
    return PairDataset(theta, x, t.name, seed, clamped)


def gaussian_linear_posterior(x):
    """Exact posterior ``(mean, variance)`` for theta ~ N(0,1), x | theta ~ N(theta,1)."""
    x = np.asarray(x, dtype=np.float64)
    return x / 2.0, np.full_like(x, 0.5) if x.ndim else 0.5


def gaussian_linear_posterior_cdf(x, t):
    mean = np.asarray(x) / 2.0
    return ndtr((np.asarray(t) - mean) / math.sqrt(0.5))


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------

def dataset_text(ds):
    header = {
        "task": ds.task,
        "n": len(ds),
        "d_theta": ds.d_theta,
        "d_x": ds.d_x,
        "seed": int(ds.seed),
        "sim_warnings": int(ds.sim_warnings),
    }
    lines = ["# " + json.dumps(header, sort_keys=True)]
    for th, xx in zip(ds.theta, ds.x):
        lines.append(",".join(repr(float(v)) for v in np.concatenate([th, xx])))
    return "\n".join(lines) + "\n"


def save_dataset(ds, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dataset_text(ds))


def load_dataset(path):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing dataset header")
        header = json.loads(first[1:])
        rows = [line for line in fh.read().splitlines() if line.strip()]
    d_theta, d_x = int(header["d_theta"]), int(header["d_x"])
    if rows:
        data = np.array([[float(v) for v in row.split(",")] for row in rows])
    else:
        data = np.empty((0, d_theta + d_x))
    if data.shape[1] != d_theta + d_x or data.shape[0] != int(header["n"]):
        raise DimError(f"{path}: rows do not match the header")
    return PairDataset(data[:, :d_theta], data[:, d_theta:], header["task"], int(header["seed"]),
                       int(header["sim_warnings"]))
