"""Small float64 tensor engine: reverse-mode gradients plus forward-mode JVP.

Every op is written once as a forward/vjp/jvp triple and dispatched on its
operands:

* any operand is a :class:`DualValue` -> forward-mode dual arithmetic (graph
  free; :class:`Value` operands are read as constants);
* any operand is a :class:`Value` -> the result is recorded on the graph;
* otherwise plain numpy arrays in, plain numpy array out.

Model code written against these ops therefore runs unchanged in all three
modes, which is what :func:`jvp` relies on.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
RMS_EPS = 1e-6
LN_EPS = 1e-6

_node_ids = itertools.count()


class _Stats:
    nodes_created = 0
    values_as_constants = False


stats = _Stats()


def node_count() -> int:
    """Number of graph nodes created so far in this process."""
    return stats.nodes_created


class Value:
    """Array participating in a reverse-mode graph."""

    __array_priority__ = 100
    __slots__ = ("data", "parents", "op", "vjp", "requires_grad", "grad", "name", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.parents: tuple = ()
        self.op: str | None = None
        self.vjp = None
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = self.op or ("leaf:" + self.name if self.name else "leaf")
        return f"Value({tag}, shape={self.shape})"

    # operator sugar -- all routed through the generic dispatcher
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)


class DualValue:
    """Primal/tangent pair for forward-mode evaluation. Never on the graph."""

    __array_priority__ = 100
    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        primal = np.asarray(primal.data if isinstance(primal, Value) else primal, dtype=DTYPE)
        tangent = np.asarray(tangent.data if isinstance(tangent, Value) else tangent, dtype=DTYPE)
        if tangent.shape != primal.shape:
            try:
                tangent = np.broadcast_to(tangent, primal.shape).copy()
            except ValueError:
                raise ShapeError(
                    f"tangent shape {tangent.shape} does not match primal shape {primal.shape}"
                ) from None
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self):
        return self.primal.shape

    @property
    def ndim(self):
        return self.primal.ndim

    def __repr__(self):
        return f"DualValue(shape={self.shape})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)


class ShapeError(ValueError):
    pass


class NoDualRuleError(NotImplementedError):
    pass


def data_of(x) -> np.ndarray:
    """Plain array behind a Value / DualValue / array-like (primal for duals)."""
    if isinstance(x, Value):
        return x.data
    if isinstance(x, DualValue):
        return x.primal
    return np.asarray(x, dtype=DTYPE)


def is_traced(x) -> bool:
    return isinstance(x, (Value, DualValue))


# ---------------------------------------------------------------------------
# op machinery


class Op:
    name = "op"

    def forward(self, *xs, **kw):
        raise NotImplementedError

    def vjp(self, g, out, xs, **kw):
        raise NotImplementedError

    jvp = None  # (dxs, out, xs, **kw) -> tangent; dxs entries None for constants


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def apply(op: Op, *args, **kw):
    if any(isinstance(a, DualValue) for a in args):
        if op.jvp is None:
            raise NoDualRuleError(f"op '{op.name}' has no dual (JVP) rule")
        xs = [data_of(a) for a in args]
        dxs = [a.tangent if isinstance(a, DualValue) else None for a in args]
        out = op.forward(*xs, **kw)
        return DualValue(out, op.jvp(dxs, out, xs, **kw))
    if not stats.values_as_constants and any(isinstance(a, Value) for a in args):
        xs = [data_of(a) for a in args]
        out = Value(op.forward(*xs, **kw))
        out.op = op.name
        out.parents = tuple(a if isinstance(a, Value) else None for a in args)
        out.vjp = lambda g, _o=out.data, _xs=xs: op.vjp(g, _o, _xs, **kw)
        stats.nodes_created += 1
        return out
    return op.forward(*[data_of(a) for a in args], **kw)


def _sum_tangents(*ts):
    ts = [t for t in ts if t is not None]
    if not ts:
        return None
    acc = ts[0]
    for t in ts[1:]:
        acc = acc + t
    return acc


# ---------------------------------------------------------------------------
# elementwise arithmetic


class _Add(Op):
    name = "add"

    def forward(self, a, b):
        return a + b

    def vjp(self, g, out, xs):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)

    def jvp(self, dxs, out, xs):
        da, db = dxs
        if da is not None and db is not None:
            return np.broadcast_to(da + db, out.shape)
        return np.broadcast_to(da if da is not None else db, out.shape).copy()


class _Sub(Op):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def vjp(self, g, out, xs):
        return _unbroadcast(g, xs[0].shape), -_unbroadcast(g, xs[1].shape)

    def jvp(self, dxs, out, xs):
        da, db = dxs
        if da is not None and db is not None:
            t = da - db
        elif da is not None:
            t = da
        else:
            t = -db
        return np.broadcast_to(t, out.shape).copy()


class _Mul(Op):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def vjp(self, g, out, xs):
        a, b = xs
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    def jvp(self, dxs, out, xs):
        (a, b), (da, db) = xs, dxs
        t = _sum_tangents(None if da is None else da * b, None if db is None else a * db)
        return np.broadcast_to(t, out.shape).copy()


class _Div(Op):
    name = "div"

    def forward(self, a, b):
        return a / b

    def vjp(self, g, out, xs):
        a, b = xs
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)

    def jvp(self, dxs, out, xs):
        (a, b), (da, db) = xs, dxs
        t = _sum_tangents(None if da is None else da / b, None if db is None else -out * db / b)
        return np.broadcast_to(t, out.shape).copy()


class _Unary(Op):
    """Elementwise op defined by f and its derivative f'(x, out)."""

    def __init__(self, name, f, df):
        self.name = name
        self.f = f
        self.df = df

    def forward(self, x):
        return self.f(x)

    def vjp(self, g, out, xs):
        return (g * self.df(xs[0], out),)

    def jvp(self, dxs, out, xs):
        return dxs[0] * self.df(xs[0], out)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_GELU_K = math.sqrt(2.0 / math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + 0.044715 * x**3)))


def _dgelu(x, out):
    inner = _GELU_K * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * _GELU_K * (1.0 + 3 * 0.044715 * x**2)


def _dsilu(x, out):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


_neg = _Unary("neg", np.negative, lambda x, o: -np.ones_like(x))
_exp = _Unary("exp", np.exp, lambda x, o: o)
_log = _Unary("log", np.log, lambda x, o: 1.0 / x)
_sin = _Unary("sin", np.sin, lambda x, o: np.cos(x))
_cos = _Unary("cos", np.cos, lambda x, o: -np.sin(x))
_sqrt = _Unary("sqrt", np.sqrt, lambda x, o: 0.5 / o)
_recip = _Unary("reciprocal", lambda x: 1.0 / x, lambda x, o: -(o * o))
_square = _Unary("square", np.square, lambda x, o: 2.0 * x)
_gelu_op = _Unary("gelu", _gelu, _dgelu)
_silu = _Unary("silu", lambda x: x * _sigmoid(x), _dsilu)
_tanh = _Unary("tanh", np.tanh, lambda x, o: 1.0 - o * o)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


class _MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return a @ b

    def vjp(self, g, out, xs):
        a, b = xs
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    def jvp(self, dxs, out, xs):
        (a, b), (da, db) = xs, dxs
        t = _sum_tangents(None if da is None else da @ b, None if db is None else a @ db)
        return np.broadcast_to(t, out.shape).copy()


class _Transpose(Op):
    name = "transpose"

    def forward(self, x, axes=None):
        return np.transpose(x, axes)

    def vjp(self, g, out, xs, axes=None):
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)

    def jvp(self, dxs, out, xs, axes=None):
        return np.transpose(dxs[0], axes)


class _Reshape(Op):
    name = "reshape"

    def forward(self, x, shape=None):
        try:
            return x.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from exc

    def vjp(self, g, out, xs, shape=None):
        return (g.reshape(xs[0].shape),)

    def jvp(self, dxs, out, xs, shape=None):
        return dxs[0].reshape(out.shape)


class _GetItem(Op):
    name = "slice"

    def forward(self, x, idx=None):
        return x[idx]

    def vjp(self, g, out, xs, idx=None):
        gx = np.zeros_like(xs[0])
        gx[idx] = g  # basic slicing only, so no repeated indices
        return (gx,)

    def jvp(self, dxs, out, xs, idx=None):
        return dxs[0][idx]


class _Concat(Op):
    name = "concat"

    def forward(self, *xs, axis=0):
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(
                i != axis % len(ref) and p != q for i, (p, q) in enumerate(zip(ref, x.shape))
            ):
                raise ShapeError(f"concat: mismatched dims {ref} vs {x.shape} along axis {axis}")
        return np.concatenate(xs, axis=axis)

    def vjp(self, g, out, xs, axis=0):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=axis))

    def jvp(self, dxs, out, xs, axis=0):
        return np.concatenate(
            [np.zeros_like(x) if d is None else d for x, d in zip(xs, dxs)], axis=axis
        )


class _Sum(Op):
    name = "sum"

    def forward(self, x, axis=None, keepdims=False):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def vjp(self, g, out, xs, axis=None, keepdims=False):
        x = xs[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    def jvp(self, dxs, out, xs, axis=None, keepdims=False):
        return np.sum(dxs[0], axis=axis, keepdims=keepdims)


class _Mean(Op):
    name = "mean"

    def forward(self, x, axis=None, keepdims=False):
        return np.mean(x, axis=axis, keepdims=keepdims)

    def vjp(self, g, out, xs, axis=None, keepdims=False):
        x = xs[0]
        n = x.size // max(np.size(out), 1)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    def jvp(self, dxs, out, xs, axis=None, keepdims=False):
        return np.mean(dxs[0], axis=axis, keepdims=keepdims)


class _Min(Op):
    name = "min"

    def forward(self, x, axis=-1):
        return np.min(x, axis=axis)

    def _mask(self, x, axis):
        idx = np.argmin(x, axis=axis)
        return np.expand_dims(idx, axis)

    def vjp(self, g, out, xs, axis=-1):
        x = xs[0]
        gx = np.zeros_like(x)
        np.put_along_axis(gx, self._mask(x, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    def jvp(self, dxs, out, xs, axis=-1):
        return np.take_along_axis(dxs[0], self._mask(xs[0], axis), axis=axis).squeeze(axis)


# ---------------------------------------------------------------------------
# fused normalisations


class _Softmax(Op):
    name = "softmax"

    def forward(self, x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def vjp(self, g, y, xs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    def jvp(self, dxs, y, xs):
        dx = dxs[0]
        return y * (dx - (dx * y).sum(axis=-1, keepdims=True))


class _RMSNorm(Op):
    name = "rms_normalize"

    def forward(self, x, eps=RMS_EPS):
        return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)

    def _r(self, x, eps):
        return 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)

    def vjp(self, g, out, xs, eps=RMS_EPS):
        x = xs[0]
        r = self._r(x, eps)
        return (r * g - x * r**3 * np.mean(g * x, axis=-1, keepdims=True),)

    def jvp(self, dxs, out, xs, eps=RMS_EPS):
        x, dx = xs[0], dxs[0]
        r = self._r(x, eps)
        return r * dx - x * r**3 * np.mean(x * dx, axis=-1, keepdims=True)


class _LayerNorm(Op):
    name = "layer_normalize"

    def forward(self, x, eps=LN_EPS):
        xc = x - x.mean(axis=-1, keepdims=True)
        return xc / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)

    def _parts(self, x, eps):
        xc = x - x.mean(axis=-1, keepdims=True)
        r = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
        return xc, r

    def vjp(self, g, out, xs, eps=LN_EPS):
        xc, r = self._parts(xs[0], eps)
        gp = r * g - xc * r**3 * np.mean(g * xc, axis=-1, keepdims=True)
        return (gp - gp.mean(axis=-1, keepdims=True),)

    def jvp(self, dxs, out, xs, eps=LN_EPS):
        xc, r = self._parts(xs[0], eps)
        dxc = dxs[0] - dxs[0].mean(axis=-1, keepdims=True)
        return r * dxc - xc * r**3 * np.mean(xc * dxc, axis=-1, keepdims=True)


class _PairwiseDistance(Op):
    """Euclidean distances between two point batches (..., N, d) x (..., M, d)."""

    name = "pairwise_distance"

    def forward(self, p, q, eps=0.0):
        if p.shape[-1] != q.shape[-1]:
            raise ShapeError(f"pairwise_distance: point dims differ {p.shape} vs {q.shape}")
        diff = p[..., :, None, :] - q[..., None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1) + eps)

    def vjp(self, g, d, xs, eps=0.0):
        p, q = xs
        w = np.where(d > 0, g / np.where(d > 0, d, 1.0), 0.0)
        gp = w.sum(axis=-1)[..., None] * p - w @ q
        gq = np.swapaxes(w, -1, -2).sum(axis=-1)[..., None] * q - np.swapaxes(w, -1, -2) @ p
        return _unbroadcast(gp, p.shape), _unbroadcast(gq, q.shape)

    def jvp(self, dxs, d, xs, eps=0.0):
        p, q = xs
        dp = np.zeros_like(p) if dxs[0] is None else dxs[0]
        dq = np.zeros_like(q) if dxs[1] is None else dxs[1]
        diff = p[..., :, None, :] - q[..., None, :, :]
        ddiff = dp[..., :, None, :] - dq[..., None, :, :]
        safe = np.where(d > 0, d, 1.0)
        return np.where(d > 0, np.sum(diff * ddiff, axis=-1) / safe, 0.0)


_add, _sub, _mul, _div = _Add(), _Sub(), _Mul(), _Div()
_matmul, _transpose, _reshape, _getitem = _MatMul(), _Transpose(), _Reshape(), _GetItem()
_concat, _sum, _mean, _min = _Concat(), _Sum(), _Mean(), _Min()
_softmax, _rms, _ln, _pdist = _Softmax(), _RMSNorm(), _LayerNorm(), _PairwiseDistance()


def add(a, b): return apply(_add, a, b)
def sub(a, b): return apply(_sub, a, b)
def mul(a, b): return apply(_mul, a, b)
def div(a, b): return apply(_div, a, b)
def neg(x): return apply(_neg, x)
def exp(x): return apply(_exp, x)
def log(x): return apply(_log, x)
def sin(x): return apply(_sin, x)
def cos(x): return apply(_cos, x)
def sqrt(x): return apply(_sqrt, x)
def reciprocal(x): return apply(_recip, x)
def square(x): return apply(_square, x)
def gelu(x): return apply(_gelu_op, x)
def silu(x): return apply(_silu, x)
def tanh(x): return apply(_tanh, x)
def matmul(a, b): return apply(_matmul, a, b)
def softmax(x): return apply(_softmax, x)
def rms_normalize(x, eps=RMS_EPS): return apply(_rms, x, eps=eps)
def layer_normalize(x, eps=LN_EPS): return apply(_ln, x, eps=eps)
def min_(x, axis=-1): return apply(_min, x, axis=axis)
def pairwise_distance(p, q, eps=0.0): return apply(_pdist, p, q, eps=eps)


def transpose(x, axes=None):
    return apply(_transpose, x, axes=None if axes is None else tuple(axes))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x, shape):
    return apply(_reshape, x, shape=tuple(shape))


def getitem(x, idx):
    return apply(_getitem, x, idx=idx)


def concat(xs: Sequence, axis=0):
    return apply(_concat, *xs, axis=axis)


def sum_(x, axis=None, keepdims=False):
    return apply(_sum, x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply(_mean, x, axis=axis, keepdims=keepdims)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# drivers


def stop_gradient(x) -> np.ndarray:
    """Detach: a plain array carrying the same numbers (primal for duals)."""
    return data_of(x).copy()


def _toposort(root: Value) -> list[Value]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in node.parents:
            if p is not None and p._id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Value, leaves: Sequence[Value] | None = None) -> dict:
    """Gradients of a scalar ``loss`` w.r.t. trainable leaves.

    Returns a dict keyed by leaf ``Value``; leaves passed explicitly but not
    reachable from ``loss`` get zeros. ``leaf.grad`` is also set.
    """
    if not isinstance(loss, Value):
        raise TypeError("backward() needs a Value on the graph")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads = {loss._id: np.ones_like(loss.data)}
    found: dict[int, Value] = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                found[node._id] = node
                node.grad = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    out = {v: v.grad for v in found.values()}
    for leaf in leaves or ():
        if leaf._id not in found:
            leaf.grad = np.zeros_like(leaf.data)
            out[leaf] = leaf.grad
    return out


def jvp(f: Callable, primals: Sequence, tangents: Sequence):
    """Evaluate ``f`` and its directional derivative along ``tangents``.

    ``f`` runs twice: once as given (so the returned ``u`` keeps its graph
    when ``f`` closes over trainable Values) and once on dual inputs, which
    yields the detached tangent. The two primals must agree bitwise.
    """
    if len(primals) != len(tangents):
        raise ValueError("primals and tangents differ in length")
    duals = []
    for p, t in zip(primals, tangents):
        if t is None:
            duals.append(p)
            continue
        if np.shape(data_of(t)) != np.shape(data_of(p)):
            raise ShapeError(
                f"jvp: tangent shape {np.shape(data_of(t))} != primal shape {np.shape(data_of(p))}"
            )
        duals.append(DualValue(data_of(p), data_of(t)))
    u = f(*primals)
    stats.values_as_constants = True
    try:
        d = f(*duals)
    finally:
        stats.values_as_constants = False
    if isinstance(d, DualValue):
        primal, tangent = d.primal, d.tangent
    else:
        primal, tangent = data_of(d), np.zeros_like(data_of(d))
    if not np.array_equal(primal, data_of(u)):
        raise RuntimeError("jvp: dual primal drifted from the reverse-mode forward pass")
    return u, tangent.copy()
