"""Reverse-mode automatic differentiation on float64 numpy tensors.

A Var wraps a value of rank <= 3 and records the operation that produced it.
Calling backward() on a scalar Var accumulates vector-Jacobian products into
.grad on every node of its graph. The op library below dispatches on type:
given plain ndarrays it computes with numpy directly and builds no graph, so
the same model code serves both training and fast evaluation.

Gradient accumulation order is fixed by the insertion-ordered topological
sort over tuple parents, so repeated backward passes over the same graph are
bit-identical.
"""

import numpy as np
from scipy.special import erf, expit

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Var:
    """Node in the computation graph; leaves are made from raw arrays."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, _parents=(), _vjp=None):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim > 3:
            raise ValueError(f"rank {v.ndim} exceeds the supported rank 3")
        self.value = v
        self.grad = None
        self._parents = tuple(_parents)
        self._vjp = _vjp

    # numpy must not fold Vars into object arrays or claim ufunc calls;
    # unsupported operations then fail loudly instead of degrading.
    __array_ufunc__ = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def backward(self, seed=None):
        """Accumulate gradients of self (a scalar unless seed is given)."""
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() needs a scalar output or an explicit seed")
            seed = np.ones_like(self.value)
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.zeros_like(self.value) + np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._vjp is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                parent.grad = g if parent.grad is None else parent.grad + g
        return self

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        val = self.value[key]
        x = self
        items = key if isinstance(key, tuple) else (key,)
        basic = all(
            k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice))
            for k in items
        )

        def vjp(g):
            gx = np.zeros_like(x.value)
            if basic:
                # basic indexing never aliases, so in-place add is exact
                gx[key] += g
            else:
                np.add.at(gx, key, g)
            return (gx,)

        return Var(val, (x,), vjp)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in visited:
                stack.append((p, False))
    return order


def value_of(x):
    """Raw ndarray behind x, whether Var or array-like."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    # sum gradient over axes numpy broadcast into existence
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, vjp_a, vjp_b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return fwd(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    av, bv = value_of(a), value_of(b)
    out = fwd(av, bv)
    parents, parts = [], []
    if isinstance(a, Var):
        parents.append(a)
        parts.append(lambda g: _unbroadcast(vjp_a(g, av, bv), av.shape))
    if isinstance(b, Var):
        parents.append(b)
        parts.append(lambda g: _unbroadcast(vjp_b(g, av, bv), bv.shape))
    return Var(out, parents, lambda g: tuple(p(g) for p in parts))


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(
        a, b, lambda x, y: x / y, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


# A stack of row blocks times a shared weight matrix is one flat gemm; the
# flat form is far faster than numpy's per-slice batched loop, and its
# gradients land directly in the operand shapes with no broadcast reduction.
def _mm_fwd(x, y):
    if x.ndim == 3 and y.ndim == 2:
        return np.matmul(x.reshape(-1, x.shape[-1]), y).reshape(x.shape[:2] + (y.shape[1],))
    return np.matmul(x, y)


def _mm_grad_a(g, x, y):
    if x.ndim == 3 and y.ndim == 2:
        return np.matmul(g.reshape(-1, y.shape[1]), y.T).reshape(x.shape)
    return np.matmul(g, np.swapaxes(y, -1, -2))


def _mm_grad_b(g, x, y):
    if x.ndim == 3 and y.ndim == 2:
        return np.matmul(x.reshape(-1, x.shape[-1]).T, g.reshape(-1, y.shape[1]))
    return np.matmul(np.swapaxes(x, -1, -2), g)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    return _binary(a, b, _mm_fwd, _mm_grad_a, _mm_grad_b)


def _unary(x, fwd, vjp):
    if not isinstance(x, Var):
        return fwd(np.asarray(x, dtype=np.float64))
    out = fwd(x.value)
    return Var(out, (x,), lambda g: (vjp(g, x.value, out),))


def exp(x):
    return _unary(x, np.exp, lambda g, v, out: g * out)


def log(x):
    return _unary(x, np.log, lambda g, v, out: g / v)


def sqrt(x):
    return _unary(x, np.sqrt, lambda g, v, out: 0.5 * g / out)


def square(x):
    return _unary(x, np.square, lambda g, v, out: 2.0 * g * v)


def cosh(x):
    return _unary(x, np.cosh, lambda g, v, out: g * np.sinh(v))


def sinh(x):
    return _unary(x, np.sinh, lambda g, v, out: g * np.cosh(v))


def tanh(x):
    return _unary(x, np.tanh, lambda g, v, out: g * (1.0 - out * out))


def sigmoid(x):
    return _unary(x, expit, lambda g, v, out: g * out * (1.0 - out))


def softplus(x):
    # logaddexp keeps large |x| exact where exp would overflow
    return _unary(x, lambda v: np.logaddexp(0.0, v), lambda g, v, out: g * expit(v))


def gelu(x):
    def fwd(v):
        return 0.5 * v * (1.0 + erf(v * _INV_SQRT2))

    def vjp(g, v, out):
        cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
        pdf = np.exp(-0.5 * v * v) * _INV_SQRT2PI
        return g * (cdf + v * pdf)

    return _unary(x, fwd, vjp)


def sum(x, axis=None, keepdims=False):
    if not isinstance(x, Var):
        return np.sum(x, axis=axis, keepdims=keepdims)
    val = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.value.shape).copy(),)

    return Var(val, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    v = value_of(x)
    n = v.size if axis is None else v.shape[axis]
    return sum(x, axis=axis, keepdims=keepdims) / float(n)


def matvec(a, x):
    """a (m, n) applied to x (..., n) -> (..., m)."""
    xshape = value_of(x).shape
    row = reshape(x, xshape[:-1] + (1, xshape[-1]))
    out = matmul(row, swap_last(a))
    return reshape(out, xshape[:-1] + (value_of(a).shape[-2],))


def dot(a, b, keepdims=False):
    """Inner product over the trailing axis."""
    return sum(mul(a, b), axis=-1, keepdims=keepdims)


def norm(x, keepdims=False):
    """L2 norm over the trailing axis; not differentiable at 0."""
    return sqrt(sum(square(x), axis=-1, keepdims=keepdims))


def softmax(x):
    def fwd(v):
        z = v - np.max(v, axis=-1, keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=-1, keepdims=True)

    if not isinstance(x, Var):
        return fwd(np.asarray(x, dtype=np.float64))
    out = fwd(x.value)

    def vjp(g):
        gs = g * out
        return (gs - out * np.sum(gs, axis=-1, keepdims=True),)

    return Var(out, (x,), vjp)


def clamp(x, lo=None, hi=None):
    """Clip to [lo, hi]; gradient is zero outside the open interval."""

    def fwd(v):
        return np.clip(v, lo, hi)

    def vjp(g, v, out):
        mask = np.ones_like(v)
        if lo is not None:
            mask = mask * (v > lo)
        if hi is not None:
            mask = mask * (v < hi)
        return g * mask

    return _unary(x, fwd, vjp)


def cross(a, b):
    """Cross product over a trailing axis of length 3."""
    return _binary(
        a,
        b,
        lambda x, y: np.cross(x, y),
        lambda g, x, y: np.cross(y, g),
        lambda g, x, y: np.cross(g, x),
    )


def det3(m):
    """Determinant of (..., 3, 3) via the scalar triple product."""
    r0, r1, r2 = m[..., 0, :], m[..., 1, :], m[..., 2, :]
    return dot(cross(r0, r1), r2)


def tanh_shrink(v):
    """tanh(||v||)/||v|| * v over the trailing axis, smooth through v = 0."""

    def factor(r):
        small = r < 1e-4
        rs = np.where(small, 1.0, r)
        return np.where(small, 1.0 - r * r / 3.0, np.tanh(rs) / rs)

    def fwd(val):
        r = np.linalg.norm(val, axis=-1, keepdims=True)
        return factor(r) * val

    def vjp(g, val, out):
        r = np.linalg.norm(val, axis=-1, keepdims=True)
        f = factor(r)
        small = r < 1e-4
        rs = np.where(small, 1.0, r)
        sech2 = 1.0 / np.cosh(rs) ** 2
        # d(f)/dr / r, with the r -> 0 series -2/3 + 8 r^2 / 15
        fprime_over_r = np.where(
            small, -2.0 / 3.0 + 8.0 * r * r / 15.0, (sech2 - f) / (rs * rs)
        )
        inner = np.sum(g * val, axis=-1, keepdims=True)
        return f * g + fprime_over_r * inner * val

    return _unary(v, fwd, vjp)


def grad(f, params):
    """Gradients of scalar f(*params) for each parameter tensor."""
    leaves = [Var(p) for p in params]
    out = f(*leaves)
    if not isinstance(out, Var):
        raise TypeError("f must build a Var from its parameters")
    out.backward()
    return [leaf.grad for leaf in leaves]


def finite_diff_check(f, params, h=1e-5):
    """Max relative error of grad(f) against central finite differences."""
    params = [np.asarray(p, dtype=np.float64) for p in params]
    gs = grad(f, params)
    worst = 0.0
    for k, p in enumerate(params):
        fd = np.zeros_like(p)
        for i in range(p.size):
            for s, sink in ((+h, 1.0), (-h, -1.0)):
                bumped = [q.copy() for q in params]
                bumped[k].flat[i] += s
                val = f(*[Var(q) for q in bumped])
                fd.flat[i] += sink * float(value_of(val)) / (2.0 * h)
        err = np.abs(gs[k] - fd) / np.maximum(1.0, np.abs(fd))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    old = x.value.shape
    return Var(np.reshape(x.value, shape), (x,), lambda g: (np.reshape(g, old),))


def swap_last(x):
    """Transpose the two trailing axes."""
    if not isinstance(x, Var):
        return np.swapaxes(x, -1, -2)
    return Var(np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def split_heads(x, n_heads):
    """(b, n, h*d) -> (h*b, n, d), head-major, so one batched matmul covers
    every head at once. The rank-4 layout exists only transiently inside the
    op; tape values stay rank <= 3."""

    def fwd(v):
        b, n, hd = v.shape
        d = hd // n_heads
        return v.reshape(b, n, n_heads, d).transpose(2, 0, 1, 3).reshape(n_heads * b, n, d)

    def vjp(g, v, out):
        b, n, hd = v.shape
        d = hd // n_heads
        return g.reshape(n_heads, b, n, d).transpose(1, 2, 0, 3).reshape(b, n, hd)

    v = value_of(x)
    if v.ndim != 3 or v.shape[-1] % n_heads != 0:
        raise ValueError("split_heads needs (b, n, h*d) with the last axis divisible by h")
    return _unary(x, fwd, vjp)


def merge_heads(x, n_heads):
    """(h*b, n, d) -> (b, n, h*d); exact inverse of split_heads."""

    def fwd(v):
        hb, n, d = v.shape
        b = hb // n_heads
        return v.reshape(n_heads, b, n, d).transpose(1, 2, 0, 3).reshape(b, n, n_heads * d)

    def vjp(g, v, out):
        hb, n, d = v.shape
        b = hb // n_heads
        return g.reshape(b, n, n_heads, d).transpose(2, 0, 1, 3).reshape(hb, n, d)

    v = value_of(x)
    if v.ndim != 3 or v.shape[0] % n_heads != 0:
        raise ValueError("merge_heads needs (h*b, n, d) with the first axis divisible by h")
    return _unary(x, fwd, vjp)


def concat(parts, axis=-1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not any(isinstance(p, Var) for p in parts):
        return out
    parts = [p if isinstance(p, Var) else Var(p) for p in parts]
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        g = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(g[offsets[i] : offsets[i + 1]], 0, axis) for i in range(len(sizes))
        )

    return Var(out, parts, vjp)


def stack(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.stack(vals, axis=axis)
    if not any(isinstance(p, Var) for p in parts):
        return out
    parts = [p if isinstance(p, Var) else Var(p) for p in parts]

    def vjp(g):
        g = np.moveaxis(g, axis, 0)
        return tuple(g[i] for i in range(len(parts)))

    return Var(out, parts, vjp)
