"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

All trainable models in this package are small (affine maps, mean
aggregation, sigmoids, softmax), so a compact tape is enough: each Var
remembers its parents together with vector-Jacobian closures, and
``backward`` walks the tape in reverse topological order. Everything runs
in float64 so analytic gradients can be validated against central finite
differences at tight tolerance.
"""

import numpy as np


class Var:
    """Node in the computation tape wrapping a float64 ndarray."""

    __slots__ = ("value", "grad", "parents", "requires_grad")

    def __init__(self, value, requires_grad=False, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p, _ in parents
        )

    @property
    def shape(self):
        return self.value.shape

    def detach(self):
        return Var(self.value.copy())

    # operator sugar -------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _op(value, pairs):
    parents = [(p, fn) for p, fn in pairs if p.requires_grad]
    return Var(value, parents=parents)


def add(a, b):
    a, b = as_var(a), as_var(b)
    return _op(
        a.value + b.value,
        [
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ],
    )


def sub(a, b):
    a, b = as_var(a), as_var(b)
    return _op(
        a.value - b.value,
        [
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ],
    )


def mul(a, b):
    a, b = as_var(a), as_var(b)
    return _op(
        a.value * b.value,
        [
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ],
    )


def div(a, b):
    a, b = as_var(a), as_var(b)
    return _op(
        a.value / b.value,
        [
            (a, lambda g: _unbroadcast(g / b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(-g * a.value / (b.value**2), b.value.shape)),
        ],
    )


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value

    def da(g):
        if bv.ndim == 1:
            return np.outer(g, bv) if av.ndim == 2 else g * bv
        if av.ndim == 1:
            return g @ bv.T
        return g @ bv.T

    def db(g):
        if av.ndim == 1:
            return np.outer(av, g) if bv.ndim == 2 else g * av
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    return _op(av @ bv, [(a, da), (b, db)])


def vsum(a, axis=None, keepdims=False):
    a = as_var(a)

    def da(g):
        if axis is None:
            return np.full(a.value.shape, g)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    return _op(a.value.sum(axis=axis, keepdims=keepdims), [(a, da)])


def vmean(a, axis=None, keepdims=False):
    a = as_var(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def log(a):
    a = as_var(a)
    return _op(np.log(a.value), [(a, lambda g: g / a.value)])


def exp(a):
    a = as_var(a)
    out = np.exp(a.value)
    return _op(out, [(a, lambda g: g * out)])


def sqrt(a):
    a = as_var(a)
    out = np.sqrt(a.value)
    return _op(out, [(a, lambda g: g * 0.5 / out)])


def sigmoid(a):
    a = as_var(a)
    out = np.empty_like(a.value)
    pos = a.value >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    ex = np.exp(a.value[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _op(out, [(a, lambda g: g * out * (1.0 - out))])


def relu(a):
    a = as_var(a)
    mask = a.value > 0
    return _op(np.where(mask, a.value, 0.0), [(a, lambda g: g * mask)])


def clip(a, lo, hi):
    """Clamp values; gradient passes only through the interior."""
    a = as_var(a)
    inside = (a.value > lo) & (a.value < hi)
    return _op(np.clip(a.value, lo, hi), [(a, lambda g: g * inside)])


def take(a, idx):
    """Gather rows along axis 0 (duplicate indices accumulate on backward)."""
    a = as_var(a)
    idx = np.asarray(idx, dtype=np.int64)

    def da(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return _op(a.value[idx], [(a, da)])


def concat(parts, axis=-1):
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def make(i):
        return lambda g: np.split(g, splits, axis=axis)[i]

    return _op(
        np.concatenate([p.value for p in parts], axis=axis),
        [(p, make(i)) for i, p in enumerate(parts)],
    )


def reshape(a, shape):
    a = as_var(a)
    return _op(a.value.reshape(shape), [(a, lambda g: g.reshape(a.value.shape))])


def transpose(a):
    a = as_var(a)
    return _op(a.value.T, [(a, lambda g: g.T)])


def add_n(terms):
    """Sum a list of same-shaped Vars."""
    total = as_var(terms[0])
    for t in terms[1:]:
        total = add(total, t)
    return total


def logsumexp(a, axis=-1, keepdims=False):
    """Stable log-sum-exp; the max shift is treated as a constant."""
    a = as_var(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    shifted = sub(a, m)
    out = add(log(vsum(exp(shifted), axis=axis, keepdims=True)), m)
    if not keepdims:
        out = reshape(out, np.squeeze(out.value, axis=axis).shape)
    return out


def log_softmax(a, axis=-1):
    return sub(as_var(a), logsumexp(a, axis=axis, keepdims=True))


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis=axis))


def l2_normalize_rows(a, eps=1e-24):
    """Row-wise L2 normalization with normalize(0) = 0."""
    a = as_var(a)
    sq = vsum(mul(a, a), axis=-1, keepdims=True)
    return div(a, sqrt(add(sq, eps)))


def backward(root):
    """Accumulate gradients of a scalar Var into every reachable parent."""
    if root.value.size != 1:
        raise ValueError("backward expects a scalar loss")
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            g = vjp(node.grad)
            parent.grad = g if parent.grad is None else parent.grad + g


class Adam:
    """Standard Adam over a list of leaf Vars (values updated in place)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / (1.0 - self.beta1**self.t)
            vhat = self.v[i] / (1.0 - self.beta2**self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


def check_finite(x, context):
    arr = x.value if isinstance(x, Var) else np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise DivergenceError("non-finite values in %s" % context)


def finite_difference_error(build_loss, params, eps=1e-6, floor=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``build_loss`` must rebuild the scalar loss Var from the current values
    of ``params`` each time it is called. The relative error denominator is
    floored so that near-zero gradients are compared absolutely.
    """
    loss = build_loss()
    backward(loss)
    analytic = [
        np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params
    ]
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(build_loss().value)
            flat[i] = orig - eps
            down = float(build_loss().value)
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            a = ana.reshape(-1)[i]
            denom = max(abs(a), abs(num), floor)
            worst = max(worst, abs(a - num) / denom)
    return worst
