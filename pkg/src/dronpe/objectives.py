"""Training objectives (NPE, DRO-NPE, Bal-NPE), AdamW and the training loop."""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .errors import DimError, NonFiniteEvaluation
from .flows import log_prob_graph
from .simulators import PairDataset, prior_log_prob

__all__ = [
    "METHODS",
    "EarlyStop",
    "TrainConfig",
    "TrainTrace",
    "AdamState",
    "npe_loss",
    "dro_regularizer",
    "dro_objective",
    "balance_regularizer",
    "objective_value_and_grad",
    "adamw_step",
    "train",
]

METHODS = ("npe", "dro", "bal")


@dataclass(frozen=True)
class EarlyStop:
    val_fraction: float = 0.1
    patience: int = 20


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; ``method`` is one of ``npe``, ``dro``, ``bal``."""

    method: str = "npe"
    epsilon: float = 0.0
    lam: float = 100.0
    epochs: int = 1000
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.01
    seed: int = 0
    early_stop: EarlyStop = None
    clip_norm: float = 100.0
    task: str = ""
    monitor_rows: int = 256
    record_timing: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be nonnegative")
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainTrace:
    """Per-epoch training record."""

    epoch: list = field(default_factory=list)
    train_risk: list = field(default_factory=list)
    val_risk: list = field(default_factory=list)
    omega: list = field(default_factory=list)
    clipped: list = field(default_factory=list)
    millis: list = field(default_factory=list)
    omega_start: float = float("nan")
    best_epoch: int = 0
    aborted: bool = False
    error: str = ""

    def __len__(self):
        return len(self.epoch)

    def to_csv(self):
        def f(v):
            return "" if v is None else repr(float(v))

        lines = ["epoch,train_risk,val_risk,omega,clipped,millis"]
        for i in range(len(self.epoch)):
            ms = "" if self.millis[i] is None else str(int(self.millis[i]))
            lines.append(
                f"{self.epoch[i]},{f(self.train_risk[i])},{f(self.val_risk[i])},{f(self.omega[i])},"
                f"{self.clipped[i]},{ms}"
            )
        return "\n".join(lines) + "\n"


def _arrays(batch):
    if isinstance(batch, PairDataset):
        return batch.theta, batch.x
    theta, x = batch
    return np.atleast_2d(np.asarray(theta, dtype=np.float64)), np.atleast_2d(np.asarray(x, dtype=np.float64))


def _check(model, theta, x):
    if theta.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if theta.shape[1] != model.d_theta or x.shape[1] != model.d_x:
        raise DimError("batch dimensions do not match the model")


def _row_checked(values, what):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NonFiniteEvaluation(f"non-finite {what} at row {bad[0]}", index=int(bad[0]))
    return values


def npe_loss(model, batch):
    """Mean negative log density ``-(1/n) sum_i log q(theta_i | x_i)``."""
    theta, x = _arrays(batch)
    _check(model, theta, x)
    lp = _row_checked(log_prob_graph(model, model.params, theta, x), "log density")
    return float(-np.mean(lp))


def _nll_dual(model, phi, theta, x):
    zd = dc.seed_duals(np.concatenate([theta, x], axis=1))
    d = model.d_theta
    th = dc.take(zd, np.arange(d), -1)
    xx = dc.take(zd, np.arange(d, d + model.d_x), -1)
    return dc.neg(log_prob_graph(model, phi, th, xx))


def dro_regularizer(model, batch):
    """``Omega = sqrt(mean_i ||grad_z loss(z_i)||^2)`` with ``z = (theta, x)``."""
    theta, x = _arrays(batch)
    _check(model, theta, x)
    return float(dc.input_grad_norm(_nll_dual(model, model.params, theta, x)))


def dro_objective(model, batch, epsilon):
    if not epsilon >= 0:
        raise ValueError("epsilon must be nonnegative")
    theta, x = _arrays(batch)
    _check(model, theta, x)
    nll = _nll_dual(model, model.params, theta, x)
    _row_checked(nll.primal, "log density")
    loss = float(np.mean(nll.primal))
    return loss + epsilon * float(dc.input_grad_norm(nll))


def _balance_terms(model, phi, theta, x, task):
    shifted = np.roll(theta, 1, axis=0)
    terms = []
    outside = 0
    for th in (theta, shifted):
        lp_prior = prior_log_prob(task, th)
        inside = np.isfinite(lp_prior)
        outside += int(np.count_nonzero(~inside))
        logit = dc.sub(log_prob_graph(model, phi, th, x), np.where(inside, lp_prior, 0.0))
        d_hat = dc.sigmoid(logit)
        if not inside.all():
            # r -> infinity outside the prior support, so d_hat -> 1
            d_hat = dc.add(dc.mul(d_hat, inside.astype(float)), (~inside).astype(float))
        terms.append(dc.mean(d_hat))
    return dc.sub(dc.add(terms[0], terms[1]), 1.0), outside


def balance_regularizer(model, batch, task, return_outside=False):
    """``E_joint[d] + E_marginal[d] - 1`` with marginal pairs ``(theta_{i-1}, x_i)``."""
    theta, x = _arrays(batch)
    _check(model, theta, x)
    if theta.shape[0] < 2:
        raise ValueError("balance regularizer needs at least two rows")
    value, outside = _balance_terms(model, model.params, theta, x, task)
    value = float(value)
    return (value, outside) if return_outside else value


def _objective_graph(model, phi, theta, x, cfg, sink):
    if cfg.method == "dro":
        nll = _nll_dual(model, phi, theta, x)
        risk = dc.mean(nll.primal)
        sink["risk"] = risk
        return dc.add(risk, dc.mul(cfg.epsilon, dc.input_grad_norm(nll)))
    risk = dc.neg(dc.mean(log_prob_graph(model, phi, theta, x)))
    sink["risk"] = risk
    if cfg.method == "bal":
        reg, _ = _balance_terms(model, phi, theta, x, cfg.task)
        return dc.add(risk, dc.mul(cfg.lam, reg))
    return risk


def objective_value_and_grad(model, theta, x, cfg, phi=None):
    """Training objective on one batch: ``(objective, npe_risk, gradient)``."""
    sink = {}
    phi = model.params if phi is None else phi
    value, grad = dc.value_and_param_grad(lambda p: _objective_graph(model, p, theta, x, cfg, sink), phi)
    return value, float(dc.value_of(sink["risk"])), grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One AdamW update with decoupled decay applied before the adaptive step."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DimError("params, grads and optimizer state must have equal shapes")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = params - lr * weight_decay * params
    new = new - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


def _split_rows(n, cfg, rng):
    if cfg.early_stop is None:
        return np.arange(n), None
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.early_stop.val_fraction * n)))
    if n_val >= n:
        raise ValueError("dataset too small for a validation split")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _omega(model, theta, x):
    try:
        return float(dc.input_grad_norm(_nll_dual(model, model.params, theta, x)))
    except FloatingPointError:
        return float("nan")


def train(model, dataset, config):
    """Mini-batch training of ``model`` on ``dataset``.

    Returns ``(model, trace)``.  With early stopping the lowest-validation
    snapshot is returned; on a non-finite loss or update the last finite
    snapshot is returned and ``trace.aborted`` is set.
    """
    cfg = config
    if cfg.epochs == 0:
        return model, TrainTrace()
    theta_all, x_all = _arrays(dataset)
    _check(model, theta_all, x_all)
    if cfg.method == "bal" and not cfg.task:
        task = getattr(dataset, "task", "")
        if not task:
            raise ValueError("Bal-NPE needs the task prior; set TrainConfig.task")
        cfg = replace(cfg, task=task)
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = _split_rows(theta_all.shape[0], cfg, rng)
    theta, x = theta_all[train_idx], x_all[train_idx]
    n = theta.shape[0]
    k = min(n, cfg.monitor_rows)
    mon_theta, mon_x = theta[:k], x[:k]
    trace = TrainTrace()
    trace.omega_start = _omega(model, mon_theta, mon_x)
    params = model.params.copy()
    state = AdamState.zeros(params.shape[0])
    best_params, best_val, since = params.copy(), math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        risk_sum = 0.0
        clipped = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                _, risk, grad = objective_value_and_grad(model, theta[idx], x[idx], cfg, phi=params)
            except FloatingPointError as exc:
                trace.aborted, trace.error = True, f"epoch {epoch}: {exc}"
                break
            gnorm = math.sqrt(float(np.dot(grad, grad)))
            if gnorm > cfg.clip_norm:
                grad = grad * (cfg.clip_norm / gnorm)
                clipped += 1
            new_params, state = adamw_step(params, grad, state, cfg.lr, weight_decay=cfg.weight_decay)
            if not np.all(np.isfinite(new_params)):
                trace.aborted, trace.error = True, f"epoch {epoch}: non-finite parameter update"
                break
            params = new_params
            risk_sum += risk * idx.shape[0]
        if trace.aborted:
            break
        current = model.with_params(params)
        val = None
        if val_idx is not None:
            try:
                val = npe_loss(current, (theta_all[val_idx], x_all[val_idx]))
            except FloatingPointError:
                val = math.inf
        trace.epoch.append(epoch)
        trace.train_risk.append(risk_sum / n)
        trace.val_risk.append(val)
        trace.omega.append(_omega(current, mon_theta, mon_x))
        trace.clipped.append(clipped)
        trace.millis.append(int((time.perf_counter() - t0) * 1000) if cfg.record_timing else None)
        if val_idx is not None:
            if val < best_val:
                best_val, best_params, since = val, params.copy(), 0
                trace.best_epoch = epoch
            else:
                since += 1
                if since >= cfg.early_stop.patience:
                    break
        else:
            trace.best_epoch = epoch
    if val_idx is not None and math.isfinite(best_val):
        return model.with_params(best_params), trace
    return model.with_params(params), trace
