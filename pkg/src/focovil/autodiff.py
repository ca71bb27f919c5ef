"""Minimal dense tensor with a reverse-mode tape.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure pushing the incoming gradient back into them.  ``backward`` walks the
graph once in reverse topological order.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-12


class ShapeMismatch(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "_owned")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self._owned = False
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        # the first contribution is stored without copying; it may alias a buffer
        # handed to another parent, so it is only mutated after we own a copy
        if self.grad is None:
            self.grad = np.asarray(g, dtype=self.data.dtype)
            self._owned = False
        elif self._owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owned = True

    def _grad_buffer(self):
        """Writable gradient array owned by this tensor."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
            self._owned = True
        elif not self._owned:
            self.grad = np.array(self.grad, copy=True)
            self._owned = True
        return self.grad

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self._accum(np.asarray(grad, dtype=self.data.dtype).reshape(self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # only leaves keep their gradient
                node.grad = None

    # operator sugar
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

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        return transpose(self)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(x, dtype=like.dtype)
    return Tensor(x)


def _pair(a, b):
    # plain numbers adopt the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    if isinstance(b, Tensor):
        return as_tensor(a, b), b
    return as_tensor(a), as_tensor(b)


def _check(out):
    # a single reduction is NaN/Inf iff some element is (barring overflow of the sum itself)
    if not np.isfinite(np.add.reduce(out, axis=None)):
        raise NonFiniteValue("non-finite value produced in forward pass")
    return out


def _make(data, parents, backward):
    out = Tensor(_check(data), dtype=data.dtype)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)
    _bshape(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    _bshape(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)
    _bshape(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    _bshape(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def sigmoid(x):
    x = as_tensor(x)
    # tanh form never overflows
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        x._accum(g * s * (1.0 - s))

    return _make(s, (x,), backward)


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)

    def backward(g):
        x._accum(g * (1.0 - t * t))

    return _make(t, (x,), backward)


def exp(x):
    x = as_tensor(x)
    e = np.exp(x.data)

    def backward(g):
        x._accum(g * e)

    return _make(e, (x,), backward)


def log(x):
    x = as_tensor(x)
    safe = np.maximum(x.data, EPS)

    def backward(g):
        x._accum(g / safe)

    return _make(np.log(safe), (x,), backward)


def sqrt(x):
    x = as_tensor(x)
    r = np.sqrt(np.maximum(x.data, EPS))

    def backward(g):
        x._accum(g * 0.5 / r)

    return _make(r, (x,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.ndim == 2 or b.ndim > 2:
                gb = np.swapaxes(a.data, -1, -2) @ g
            else:
                # batched lhs against a shared matrix: fold the batch dims
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            b._accum(_unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)

    def backward(g):
        x._accum(np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc

    def backward(g):
        x._accum(g.reshape(x.shape))

    return _make(out, (x,), backward)


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                x._accum(g[tuple(idx)])

    return _make(out, xs, backward)


def stack(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc

    ax = axis % out.ndim
    lead = (slice(None),) * ax

    def backward(g):
        for k, x in enumerate(xs):
            if x.requires_grad:
                x._accum(g[lead + (k,)])

    return _make(out, xs, backward)


def slice_(x, idx):
    x = as_tensor(x)
    out = x.data[idx]

    def backward(g):
        buf = x._grad_buffer()
        if _fancy(idx):
            np.add.at(buf, idx, g)
        else:
            buf[idx] += g

    return _make(np.array(out, copy=True), (x,), backward)


def _fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# ---------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _make(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def l2_norm(x, axis=-1, keepdims=False, floor=0.0):
    """Euclidean norm along ``axis``.

    The forward value is ``max(norm, floor)``; the backward pass divides by
    ``max(norm, EPS)`` so a zero vector has zero gradient instead of NaN.
    """
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    val = np.maximum(n, floor) if floor > 0 else n
    active = (n >= floor) if floor > 0 else np.ones_like(n, dtype=bool)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(g * active * x.data / np.maximum(n, EPS))

    return _make(val if keepdims else np.squeeze(val, axis=axis), (x,), backward)


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        x._accum(s * (g - np.sum(g * s, axis=axis, keepdims=True)))

    return _make(s, (x,), backward)


def logsumexp(x, axis=-1, keepdims=False, mask=None):
    """Stable ``log(sum(exp(x) * mask))``; masked-out entries contribute nothing."""
    x = as_tensor(x)
    d = x.data if mask is None else np.where(mask, x.data, -np.inf)
    m = np.max(d, axis=axis, keepdims=True)
    e = np.exp(d - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.log(s) + m

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(g * e / s)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (x,), backward)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - np.max(logits.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1))
    rows = np.arange(len(labels))
    nll = lse - z[rows, labels]
    p = np.exp(z - lse[:, None])

    def backward(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        logits._accum(g * d / len(labels))

    return _make(np.asarray(nll.mean(), dtype=logits.dtype), (logits,), backward)


def gru_step(xw, h, U):
    """Fused GRU update.

    ``xw`` (B, 3h) is the input projection plus bias with column blocks
    (update, reset, candidate); ``U`` (h, 3h) is the recurrent weight.
    Equivalent to ``h + z * (tanh(xw_c + (r * h) @ U_c) - h)`` with
    ``z, r = sigmoid(xw_zr + h @ U_zr)``.
    """
    xw, h, U = as_tensor(xw), as_tensor(h), as_tensor(U)
    w = h.shape[-1]
    if U.shape != (w, 3 * w) or xw.shape[-1] != 3 * w or xw.shape[:-1] != h.shape[:-1]:
        raise ShapeMismatch(f"gru_step: xw {xw.shape}, h {h.shape}, U {U.shape}")
    hd, Ud = h.data, U.data
    zr = 0.5 * (1.0 + np.tanh(0.5 * (xw.data[:, : 2 * w] + hd @ Ud[:, : 2 * w])))
    z, r = zr[:, :w], zr[:, w:]
    rh = r * hd
    c = np.tanh(xw.data[:, 2 * w:] + rh @ Ud[:, 2 * w:])
    out = hd + z * (c - hd)

    def backward(g):
        da_c = g * z * (1.0 - c * c)
        drh = da_c @ Ud[:, 2 * w:].T
        da_zr = np.concatenate([g * (c - hd) * z * (1.0 - z), drh * hd * r * (1.0 - r)], axis=1)
        if xw.requires_grad:
            xw._accum(np.concatenate([da_zr, da_c], axis=1))
        if U.requires_grad:
            buf = U._grad_buffer()
            buf[:, : 2 * w] += hd.T @ da_zr
            buf[:, 2 * w:] += rh.T @ da_c
        if h.requires_grad:
            h._accum(g * (1.0 - z) + drh * r + da_zr @ Ud[:, : 2 * w].T)

    return _make(out, (xw, h, U), backward)


def parameter(data, name=None, dtype=np.float64):
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


# ---------------------------------------------------------------- gradient checking

class GradCheckReport:
    """Outcome of :func:`grad_check`.

    ``failures`` holds ``(input index, element index, analytic, numeric)`` for
    every element whose relative error exceeds the tolerance.
    """

    def __init__(self, max_rel_error, failures, tol):
        self.max_rel_error = max_rel_error
        self.failures = failures
        self.tol = tol

    @property
    def ok(self):
        return not self.failures

    def __repr__(self):
        return f"GradCheckReport(max_rel_error={self.max_rel_error:.3g}, failures={len(self.failures)})"


def grad_check(f, inputs, h=1e-5, tol=1e-6, floor=1e-4, sample=None, seed=0):
    """Compare reverse-mode gradients of scalar ``f(*tensors)`` with central differences.

    The relative error of one element is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps near-zero gradients from turning rounding noise into huge ratios.
    Inputs are cast to float64 and left unmodified.  With ``sample`` only that
    many seeded-random elements of each larger input are probed.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*tensors)
    if out.size != 1:
        raise ShapeMismatch(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value(k, idx, delta):
        probe = [a.copy() for a in arrays]
        probe[k][idx] += delta
        return float(f(*[Tensor(p) for p in probe]).data)

    rng = np.random.default_rng(seed)
    worst, failures = 0.0, []
    for k, a in enumerate(arrays):
        indices = list(np.ndindex(a.shape))
        if sample is not None and len(indices) > sample:
            indices = [indices[j] for j in sorted(rng.choice(len(indices), sample, replace=False))]
        for idx in indices:
            num = (value(k, idx, h) - value(k, idx, -h)) / (2 * h)
            ana = float(analytic[k][idx])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
            if err > tol:
                failures.append((k, idx, ana, num))
    return GradCheckReport(worst, failures, tol)
