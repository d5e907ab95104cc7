"""Small differentiation engine: reverse mode over arrays plus forward-mode duals.

Every elementary operation is a scalar function applied elementwise, so the
graph is a scalar graph evaluated a whole batch at a time.  Three evaluation
modes share the same op functions:

* plain ``numpy.ndarray`` inputs: no graph, ordinary numpy evaluation;
* :class:`Node` inputs: a reverse-mode graph is recorded;
* :class:`Dual` inputs: forward-mode tangents ride along with the primal.

A ``Dual`` may carry ``Node`` primals and tangents.  That is how the
regulariser gets its parameter gradient: the tangents with respect to the
data ``z`` are graph nodes, so a reverse pass over the parameters
differentiates straight through them (forward-over-reverse).

Tangent arrays put the direction axis first: a primal of shape ``(B, k)``
has tangent shape ``(D, B, k)``.  Axis arguments used on duals must be
negative (or ``None``) so they address the same primal axis in both.
"""

import itertools

import numpy as np
from scipy.special import expit

from .errors import DimError, NonFiniteEvaluation

__all__ = [
    "Node",
    "Dual",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "tanh",
    "softplus",
    "sigmoid",
    "asinh",
    "log",
    "exp",
    "square",
    "sqrt",
    "reciprocal",
    "sum",
    "mean",
    "take",
    "concat",
    "split",
    "backward",
    "value_of",
    "value_and_param_grad",
    "input_grad",
    "input_grads",
    "input_grad_norm",
    "param_grad_of_input_grad_norm",
]

_ids = itertools.count()

SQRT_GUARD = 1e-30


class Node:
    """A recorded value in the reverse-mode graph.

    Leaves have ``vjp is None``; after :func:`backward` their ``grad`` holds
    the accumulated adjoint.
    """

    __slots__ = ("value", "parents", "vjp", "op", "id", "grad")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64) if not isinstance(value, np.ndarray) else value
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.id = next(_ids)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))


class Dual:
    """Primal value with one tangent per input direction.

    ``tangent is None`` means the value is constant in the input directions.
    """

    __slots__ = ("primal", "tangent")
    __array_priority__ = 1001

    def __init__(self, primal, tangent=None):
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self):
        return np.shape(value_of(self.primal))

    def __repr__(self):
        return f"Dual(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))


class _SliceGrad:
    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


def value_of(a):
    """Strip graph/dual wrappers and return the underlying array."""
    if isinstance(a, Dual):
        return value_of(a.primal)
    if isinstance(a, Node):
        return a.value
    return a


def _primal(a):
    return a.primal if isinstance(a, Dual) else a


def _tangent(a):
    return a.tangent if isinstance(a, Dual) else None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _is_node(a):
    return isinstance(a, Node)


# --------------------------------------------------------------------------
# binary arithmetic
# --------------------------------------------------------------------------

def _tsum(t1, t2):
    if t1 is None:
        return t2
    if t2 is None:
        return t1
    return add(t1, t2)


def add(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return Dual(add(_primal(a), _primal(b)), _tsum(_tangent(a), _tangent(b)))
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not (_is_node(a) or _is_node(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    na, nb = _is_node(a), _is_node(b)

    def vjp(g):
        return (_unbroadcast(g, sa) if na else None, _unbroadcast(g, sb) if nb else None)

    return Node(out, (a, b), vjp, "add")


def neg(a):
    if isinstance(a, Dual):
        return Dual(neg(a.primal), None if a.tangent is None else neg(a.tangent))
    if not _is_node(a):
        return -a
    return Node(-a.value, (a,), lambda g: (-g,), "neg")


def sub(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        tb = _tangent(b)
        return Dual(sub(_primal(a), _primal(b)), _tsum(_tangent(a), None if tb is None else neg(tb)))
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not (_is_node(a) or _is_node(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    na, nb = _is_node(a), _is_node(b)

    def vjp(g):
        return (_unbroadcast(g, sa) if na else None, _unbroadcast(-g, sb) if nb else None)

    return Node(out, (a, b), vjp, "sub")


def mul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        pa, pb = _primal(a), _primal(b)
        ta, tb = _tangent(a), _tangent(b)
        t = None
        if ta is not None:
            t = mul(ta, pb)
        if tb is not None:
            t = _tsum(t, mul(pa, tb))
        return Dual(mul(pa, pb), t)
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not (_is_node(a) or _is_node(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    na, nb = _is_node(a), _is_node(b)

    def vjp(g):
        return (
            _unbroadcast(g * bv, sa) if na else None,
            _unbroadcast(g * av, sb) if nb else None,
        )

    return Node(out, (a, b), vjp, "mul")


def matmul(a, w):
    """``a @ w`` with ``a`` of shape ``(..., K)`` and a 2-D ``w`` of shape ``(K, M)``.

    ``w`` must not be a dual (weights do not depend on the data).
    """
    if isinstance(w, Dual):
        raise TypeError("matmul weights cannot carry data tangents")
    if isinstance(a, Dual):
        t = None if a.tangent is None else matmul(a.tangent, w)
        return Dual(matmul(a.primal, w), t)
    av, wv = value_of(a), value_of(w)
    lead = av.shape[:-1]
    a2 = av.reshape(-1, av.shape[-1])
    out = (a2 @ wv).reshape(lead + (wv.shape[1],))
    if not (_is_node(a) or _is_node(w)):
        return out
    na, nw = _is_node(a), _is_node(w)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ wv.T).reshape(av.shape) if na else None
        gw = a2.T @ g2 if nw else None
        return ga, gw

    return Node(out, (a, w), vjp, "matmul")


# --------------------------------------------------------------------------
# elementwise unary functions
# --------------------------------------------------------------------------

def _unary(a, fn, dfn, name):
    av = a.value
    y = fn(av)
    return Node(y, (a,), lambda g: (g * dfn(av, y),), name)


def tanh(a):
    if isinstance(a, Dual):
        p = tanh(a.primal)
        if a.tangent is None:
            return Dual(p, None)
        return Dual(p, mul(sub(1.0, square(p)), a.tangent))
    if not _is_node(a):
        return np.tanh(a)
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def _softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a):
    """``log(1 + e^a)`` evaluated as ``max(a, 0) + log1p(exp(-|a|))``."""
    if isinstance(a, Dual):
        p = softplus(a.primal)
        if a.tangent is None:
            return Dual(p, None)
        return Dual(p, mul(sigmoid(a.primal), a.tangent))
    if not _is_node(a):
        return _softplus_np(a)
    return _unary(a, _softplus_np, lambda x, y: expit(x), "softplus")


def sigmoid(a):
    if isinstance(a, Dual):
        p = sigmoid(a.primal)
        if a.tangent is None:
            return Dual(p, None)
        return Dual(p, mul(mul(p, sub(1.0, p)), a.tangent))
    if not _is_node(a):
        return expit(a)
    return _unary(a, expit, lambda x, y: y * (1.0 - y), "sigmoid")


def asinh(a):
    if isinstance(a, Dual):
        p = asinh(a.primal)
        if a.tangent is None:
            return Dual(p, None)
        slope = reciprocal(sqrt(add(1.0, square(a.primal))))
        return Dual(p, mul(slope, a.tangent))
    if not _is_node(a):
        return np.arcsinh(a)
    return _unary(a, np.arcsinh, lambda x, y: 1.0 / np.sqrt(1.0 + x * x), "asinh")


def log(a):
    if isinstance(a, Dual):
        p = log(a.primal)
        if a.tangent is None:
            return Dual(p, None)
        return Dual(p, mul(reciprocal(a.primal), a.tangent))
    if not _is_node(a):
        return np.log(a)
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def exp(a):
    if isinstance(a, Dual):
        p = exp(a.primal)
        if a.tangent is None:
            return Dual(p, None)
        return Dual(p, mul(p, a.tangent))
    if not _is_node(a):
        return np.exp(a)
    return _unary(a, np.exp, lambda x, y: y, "exp")


def square(a):
    if isinstance(a, Dual):
        p = square(a.primal)
        if a.tangent is None:
            return Dual(p, None)
        return Dual(p, mul(mul(2.0, a.primal), a.tangent))
    if not _is_node(a):
        return a * a
    return _unary(a, lambda x: x * x, lambda x, y: 2.0 * x, "square")


def _guarded_half_rsqrt(x):
    # d sqrt(s)/ds, defined as 0 at s <= SQRT_GUARD
    out = np.zeros_like(x)
    ok = x > SQRT_GUARD
    out[ok] = 0.5 / np.sqrt(x[ok])
    return out


def _guarded_half_rsqrt_op(a):
    if not _is_node(a):
        return _guarded_half_rsqrt(np.asarray(a, dtype=np.float64))
    av = a.value

    def dfn(x, y):
        out = np.zeros_like(x)
        ok = x > SQRT_GUARD
        out[ok] = -0.25 * x[ok] ** -1.5
        return out

    return Node(_guarded_half_rsqrt(av), (a,), lambda g: (g * dfn(av, None),), "half_rsqrt")


def sqrt(a):
    """Square root whose derivative is taken as 0 where the argument is <= 1e-30."""
    if isinstance(a, Dual):
        p = sqrt(a.primal)
        if a.tangent is None:
            return Dual(p, None)
        return Dual(p, mul(_guarded_half_rsqrt_op(a.primal), a.tangent))
    if not _is_node(a):
        return np.sqrt(a)
    av = np.asarray(a.value)
    return Node(np.sqrt(av), (a,), lambda g: (g * _guarded_half_rsqrt(av),), "sqrt")


def reciprocal(a):
    if isinstance(a, Dual):
        p = reciprocal(a.primal)
        if a.tangent is None:
            return Dual(p, None)
        return Dual(p, mul(neg(square(p)), a.tangent))
    if not _is_node(a):
        return 1.0 / a
    return _unary(a, lambda x: 1.0 / x, lambda x, y: -(y * y), "reciprocal")


# --------------------------------------------------------------------------
# reductions and structural ops
# --------------------------------------------------------------------------

def _check_dual_axis(axis):
    if axis is None:
        return
    axes = axis if isinstance(axis, tuple) else (axis,)
    if any(ax >= 0 for ax in axes):
        raise ValueError("axes used on dual values must be negative")


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming on purpose
    if isinstance(a, Dual):
        _check_dual_axis(axis)
        p = sum(a.primal, axis)
        if a.tangent is None:
            return Dual(p, None)
        if axis is None:
            nd = np.ndim(value_of(a.tangent))
            taxis = tuple(range(1, nd)) if nd > 1 else None
            return Dual(p, a.tangent if taxis is None else sum(a.tangent, taxis))
        return Dual(p, sum(a.tangent, axis))
    if not _is_node(a):
        return np.sum(a, axis=axis)
    av = a.value
    out = np.sum(av, axis=axis)
    shape = av.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        gk = np.expand_dims(g, axes)
        return (np.broadcast_to(gk, shape).copy(),)

    return Node(np.asarray(out), (a,), vjp, "sum")


def mean(a, axis=None):
    n = np.size(value_of(a)) if axis is None else np.shape(value_of(a))[axis]
    return mul(sum(a, axis), 1.0 / n)


def take(a, index, axis=-1):
    """Select entries along ``axis`` (0 or -1); indices must be unique."""
    index = np.asarray(index, dtype=np.intp)
    if isinstance(a, Dual):
        if axis != -1:
            raise ValueError("take on duals supports axis=-1 only")
        t = None if a.tangent is None else take(a.tangent, index, -1)
        return Dual(take(a.primal, index, -1), t)
    av = value_of(a)
    out = np.take(av, index, axis=axis)
    if not _is_node(a):
        return out
    shape = av.shape

    def vjp(g):
        full = np.zeros(shape)
        if axis == 0:
            full[index] = g
        else:
            full[..., index] = g
        return (full,)

    return Node(out, (a,), vjp, "take")


def concat(parts, axis=-1):
    """Concatenate along the last axis; dual parts may be mixed with constants."""
    if axis != -1:
        raise ValueError("concat supports axis=-1 only")
    if any(isinstance(p, Dual) for p in parts):
        primals = [_primal(p) for p in parts]
        tangents = [_tangent(p) for p in parts]
        if all(t is None for t in tangents):
            return Dual(concat(primals), None)
        ref = next(value_of(t) for t in tangents if t is not None)
        ndir = ref.shape[0]
        filled = []
        for p, t in zip(primals, tangents):
            if t is None:
                t = np.zeros((ndir,) + np.shape(value_of(p)))
            filled.append(t)
        return Dual(concat(primals), concat(filled))
    values = [value_of(p) for p in parts]
    lead = np.broadcast_shapes(*[v.shape[:-1] for v in values])
    values = [np.broadcast_to(v, lead + v.shape[-1:]) for v in values]
    out = np.concatenate(values, axis=-1)
    if not any(_is_node(p) for p in parts):
        return out
    sizes = [v.shape[-1] for v in values]
    bounds = np.cumsum([0] + sizes)
    shapes = [np.shape(value_of(p)) for p in parts]
    flags = [_is_node(p) for p in parts]

    def vjp(g):
        return tuple(
            _unbroadcast(g[..., bounds[i]:bounds[i + 1]], shapes[i]) if flags[i] else None
            for i in range(len(parts))
        )

    return Node(out, tuple(parts), vjp, "concat")


def split(flat, shapes):
    """Cut a flat vector into consecutive reshaped pieces."""
    pieces = []
    start = 0
    for shape in shapes:
        size = int(np.prod(shape)) if len(shape) else 1
        sl = slice(start, start + size)
        if _is_node(flat):
            view = flat.value[sl].reshape(shape)

            def vjp(g, sl=sl):
                return (_SliceGrad(sl, g.reshape(-1)),)

            pieces.append(Node(view, (flat,), vjp, "split"))
        else:
            pieces.append(np.asarray(flat)[sl].reshape(shape))
        start += size
    return pieces


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------

def _topo(out):
    seen = {}
    stack = [out]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        for p in node.parents:
            if isinstance(p, Node) and p.id not in seen:
                stack.append(p)
    return [seen[k] for k in sorted(seen, reverse=True)]


def first_nonfinite(out):
    """Return the earliest graph node whose value is not finite, or ``None``."""
    for node in reversed(_topo(out)):
        if not np.all(np.isfinite(node.value)):
            return node
    return None


def _raise_nonfinite(out):
    bad = first_nonfinite(out)
    if bad is None:
        raise NonFiniteEvaluation("non-finite result")
    raise NonFiniteEvaluation(
        f"non-finite value produced by operation #{bad.id} ({bad.op})", index=bad.id, op=bad.op
    )


def backward(out, seed=None):
    """Accumulate adjoints of ``out`` into every leaf reachable from it.

    Nodes are visited in decreasing creation order, which is a valid reverse
    topological order and keeps accumulation order fixed run to run.
    """
    order = _topo(out)
    grads = {out.id: np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)}
    owned = set()
    for node in order:
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not isinstance(parent, Node):
                continue
            pid = parent.id
            cur = grads.get(pid)
            if isinstance(pg, _SliceGrad):
                if cur is None:
                    cur = np.zeros(parent.value.shape)
                    grads[pid] = cur
                    owned.add(pid)
                elif pid not in owned:
                    cur = cur.copy()
                    grads[pid] = cur
                    owned.add(pid)
                cur[pg.index] += pg.value
            elif cur is None:
                grads[pid] = pg
            elif pid in owned:
                cur += pg
            else:
                grads[pid] = cur + pg
                owned.add(pid)


# --------------------------------------------------------------------------
# public entry points
# --------------------------------------------------------------------------

def value_and_param_grad(f, phi):
    """Value and reverse-mode gradient of a scalar program ``f(phi)``.

    Parameters
    ----------
    f : callable
        Takes a graph node wrapping ``phi`` and returns a scalar node.
    phi : array_like
        Flat parameter vector.

    Returns
    -------
    value : float
    grad : ndarray, same length as ``phi``

    Raises
    ------
    NonFiniteEvaluation
        If any intermediate is NaN/inf; ``index`` names the first bad op.
    """
    leaf = Node(np.array(phi, dtype=np.float64))
    out = f(leaf)
    if not isinstance(out, Node):
        val = float(np.asarray(out))
        if not np.isfinite(val):
            raise NonFiniteEvaluation("non-finite result")
        return val, np.zeros_like(leaf.value)
    if out.value.size != 1:
        raise ValueError("program output must be scalar")
    if not np.isfinite(out.value).all():
        _raise_nonfinite(out)
    backward(out)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    if not np.isfinite(grad).all():
        raise NonFiniteEvaluation("non-finite gradient")
    return float(out.value), grad


def input_grad(f, z, dim=None):
    """Forward-mode gradient of a scalar program with respect to its input vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise DimError("input_grad expects a 1-D input vector")
    if dim is not None and z.shape[0] != dim:
        raise DimError(f"input has {z.shape[0]} coordinates, expected {dim}")
    d = z.shape[0]
    out = f(Dual(z, np.eye(d)))
    if not isinstance(out, Dual) or out.tangent is None:
        return np.zeros(d)
    return np.asarray(value_of(out.tangent), dtype=np.float64).reshape(d)


def seed_duals(z):
    """Dual wrapping a batch ``z`` of shape ``(B, D)`` with unit tangents."""
    z = np.asarray(z, dtype=np.float64)
    b, d = z.shape
    tangent = np.broadcast_to(np.eye(d)[:, None, :], (d, b, d))
    return Dual(z, tangent)


def input_grads(f, z):
    """Row-wise input gradients of a batched program ``f: (B, D) -> (B,)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise DimError("input_grads expects a (B, D) batch")
    out = f(seed_duals(z))
    if out.tangent is None:
        return np.zeros_like(z)
    return np.asarray(value_of(out.tangent), dtype=np.float64).T.copy()


def input_grad_norm(loss_dual):
    """Root-mean-square input-gradient norm of a per-row loss dual.

    ``loss_dual`` has primal shape ``(B,)`` and tangent ``(D, B)``; returns
    ``sqrt(mean_i ||grad_z loss_i||^2)`` in whatever mode the tangent lives in.
    """
    t = loss_dual.tangent
    if t is None:
        return 0.0
    b = np.shape(value_of(t))[1]
    return sqrt(mul(sum(square(t)), 1.0 / b))


def param_grad_of_input_grad_norm(f, phi, z):
    """Regulariser value and its parameter gradient.

    Parameters
    ----------
    f : callable
        ``f(phi_node, z_dual)`` returning the per-row loss as a dual with
        primal shape ``(B,)``.
    phi : array_like
        Flat parameter vector.
    z : array_like, shape (B, D)
        Batch of inputs.

    Returns
    -------
    omega : float
        ``sqrt(mean_i ||grad_z f_i||^2)``.
    grad : ndarray
        Gradient of ``omega`` with respect to ``phi``; zero when ``omega == 0``.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise DimError("batch must be a non-empty (B, D) array")
    return value_and_param_grad(lambda p: input_grad_norm(f(p, seed_duals(z))), phi)
