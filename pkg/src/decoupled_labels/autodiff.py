"""Minimal reverse-mode autodiff on float64 numpy arrays.

Each op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. :func:`backward` walks the
recorded graph in reverse topological order, accumulates into the ``grad``
buffers of leaf tensors and then releases the visited part of the graph.
"""
from contextlib import contextmanager

import numpy as np

from . import _kernels

EPS = 1e-7

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _released(_g):
    raise RuntimeError("graph already released by a previous backward()")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar for the handful of combinations the losses need
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss):
    """Reverse pass from a scalar ``loss``; leaf grads accumulate in place."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._parents = ()
        node._backward = _released


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------

def affine(x, W, b):
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError(
            f"affine expects x[B,din], W[din,dout], b[dout]; got {x.shape}, {W.shape}, {b.shape}"
        )
    if x.shape[1] != W.shape[0]:
        raise ValueError(f"affine: x has din={x.shape[1]} but W has din={W.shape[0]}")
    if b.shape[0] != W.shape[1]:
        raise ValueError(f"affine: b has dout={b.shape[0]} but W has dout={W.shape[1]}")
    xd, Wd = x.data, W.data

    def bw(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return _node(xd @ Wd + b.data, (x, W, b), bw)


def matmul_const(x, C):
    """``x @ C`` for a fixed (non-differentiable) matrix ``C``."""
    x = as_tensor(x)
    C = np.asarray(C, dtype=np.float64)
    if x.shape[-1] != C.shape[0]:
        raise ValueError(f"matmul_const: x has {x.shape[-1]} columns, C has {C.shape[0]} rows")
    return _node(x.data @ C, (x,), lambda g: (g @ C.T,))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def mix(a, b, eta):
    """Convex combination ``eta*a + (1-eta)*b``."""
    a, b = as_tensor(a), as_tensor(b)
    eta = float(eta)
    return _node(eta * a.data + (1.0 - eta) * b.data, (a, b), lambda g: (eta * g, (1.0 - eta) * g))


def total(a):
    a = as_tensor(a)
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a):
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_rows(x, idx):
    """Gather rows ``x[idx]``; the backward pass scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), bw)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), bw)


def logit(p):
    """Inverse sigmoid of ``p`` clamped to [EPS, 1-EPS]."""
    p = as_tensor(p)
    inside = (p.data > EPS) & (p.data < 1.0 - EPS)
    pc = np.clip(p.data, EPS, 1.0 - EPS)
    out = np.log(pc) - np.log1p(-pc)
    return _node(out, (p,), lambda g: (g * inside / (pc * (1.0 - pc)),))


def gradient_reversal(x, lam):
    """Identity forward; backward multiplies the incoming gradient by ``-lam``."""
    lam = float(lam)
    if lam < 0:
        raise ValueError(f"gradient reversal scale must be >= 0, got {lam}")
    x = as_tensor(x)
    return _node(x.data.copy(), (x,), lambda g: (-lam * g,))


def detach(x):
    return Tensor(as_tensor(x).data.copy())


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_loss(p, q):
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 targets ``q``."""
    p = as_tensor(p)
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"bce_loss: p has shape {p.shape}, q has shape {q.shape}")
    pc = np.clip(p.data, EPS, 1.0 - EPS)
    inside = (p.data > EPS) & (p.data < 1.0 - EPS)
    n = p.data.size
    val = -(q * np.log(pc) + (1.0 - q) * np.log1p(-pc)).mean()

    def bw(g):
        return (float(g) * inside * (-q / pc + (1.0 - q) / (1.0 - pc)) / n,)

    return _node(np.asarray(val), (p,), bw)


def kl_divergence(p, r):
    """KL(p || r) along the last axis, averaged over leading rows.

    Both inputs must already be distributions; entries are clamped to at
    least EPS inside the logarithms.
    """
    p, r = as_tensor(p), as_tensor(r)
    if p.shape != r.shape:
        raise ValueError(f"kl_divergence: shape mismatch {p.shape} vs {r.shape}")
    for name, t in (("p", p), ("r", r)):
        if np.any(t.data < 0) or np.any(np.abs(t.data.sum(axis=-1) - 1.0) > 1e-9):
            raise ValueError(f"kl_divergence: {name} is not a normalized distribution")
    pd, rd = p.data, r.data
    pc = np.maximum(pd, EPS)
    rc = np.maximum(rd, EPS)
    n_rows = pd.size // pd.shape[-1] if pd.ndim else 1
    val = (pd * (np.log(pc) - np.log(rc))).sum() / n_rows

    def bw(g):
        g = float(g) / n_rows
        gp = g * (np.log(pc) - np.log(rc) + (pd > EPS))
        gr = -g * (rd > EPS) * pd / rc
        return gp, gr

    return _node(np.asarray(val), (p, r), bw)


def masked_softmax(x, k):
    """Softmax of each row of ``x`` over every column except ``k[row]``, which is set to 0."""
    x = as_tensor(x)
    squeeze = x.data.ndim == 1
    xd = np.atleast_2d(x.data)
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), (xd.shape[0],))
    if np.any(k < 0) or np.any(k >= xd.shape[1]):
        raise IndexError(f"mask index out of range for {xd.shape[1]} classes")
    rows = np.arange(xd.shape[0])
    z = xd.copy()
    z[rows, k] = -np.inf
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    s[rows, k] = 0.0

    def bw(g):
        g2 = np.atleast_2d(g)
        gx = s * (g2 - (g2 * s).sum(axis=1, keepdims=True))
        gx[rows, k] = 0.0
        return (gx.reshape(x.shape),)

    return _node(s.reshape(x.shape), (x,), bw)


def masked_kl(x, y, k):
    """Per-row KL between masked softmaxes of score rows ``x`` and ``y``.

    Evaluated in log space, so no clamping is needed. Column ``k[r]`` is
    excluded from both distributions of row ``r``.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape or x.data.ndim != 2:
        raise ValueError(f"masked_kl: expected two equal 2-D shapes, got {x.shape} and {y.shape}")
    k = np.ascontiguousarray(np.broadcast_to(np.asarray(k, dtype=np.int64), (x.shape[0],)))
    if np.any(k < 0) or np.any(k >= x.shape[1]):
        raise IndexError(f"mask index out of range for {x.shape[1]} classes")
    xd = np.ascontiguousarray(x.data)
    yd = np.ascontiguousarray(y.data)
    kl, p, q, log_ratio = _kernels.masked_kl_forward(xd, yd, k)

    def bw(g):
        return _kernels.masked_kl_backward(np.ascontiguousarray(g), p, q, log_ratio, kl, k)

    return _node(kl, (x, y), bw)


# ---------------------------------------------------------------------------
# parameters and optimizers
# ---------------------------------------------------------------------------

class ParameterSet:
    """Named leaf tensors with gradient buffers, kept in insertion order."""

    def __init__(self):
        self._params = {}

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, *prefixes):
        """Parameter names starting with any of ``prefixes`` (all when none given)."""
        if not prefixes:
            return list(self._params)
        return [n for n in self._params if n.split(".", 1)[0] in prefixes or n in prefixes]

    def zero_grad(self, names=None):
        for n in names if names is not None else self._params:
            self._params[n].grad[...] = 0.0

    def state(self):
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, arrays):
        for n, t in self._params.items():
            a = np.asarray(arrays[n], dtype=np.float64)
            if a.shape != t.data.shape:
                raise ValueError(f"parameter {n}: expected shape {t.data.shape}, got {a.shape}")
            t.data[...] = a


class Optimizer:
    """Plain SGD or Adam over a :class:`ParameterSet`.

    ``step(names)`` touches only the listed parameters; Adam keeps a step
    count per parameter so partial updates stay correctly bias-corrected.
    """

    def __init__(self, params, lr, mode="adam", betas=(0.9, 0.999), eps=1e-8):
        if mode not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = float(lr)
        self.mode = mode
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, names=None):
        names = list(self.params) if names is None else names
        for n in names:
            if not np.all(np.isfinite(self.params[n].grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {n!r}")
        for n in names:
            p = self.params[n]
            g = p.grad
            if self.mode == "sgd":
                p.data -= self.lr * g
                continue
            if n not in self.m:
                self.m[n] = np.zeros_like(g)
                self.v[n] = np.zeros_like(g)
                self.t[n] = 0
            self.t[n] += 1
            t = self.t[n]
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            m_hat = self.m[n] / (1.0 - self.beta1**t)
            v_hat = self.v[n] / (1.0 - self.beta2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self):
        out = {}
        for n in self.m:
            out[f"{n}@m"] = self.m[n].copy()
            out[f"{n}@v"] = self.v[n].copy()
            out[f"{n}@t"] = np.asarray(float(self.t[n]))
        return out

    def load_state(self, arrays):
        self.m, self.v, self.t = {}, {}, {}
        for key, a in arrays.items():
            name, _, kind = key.rpartition("@")
            if kind == "m":
                self.m[name] = np.array(a, dtype=np.float64)
            elif kind == "v":
                self.v[name] = np.array(a, dtype=np.float64)
            elif kind == "t":
                self.t[name] = int(np.asarray(a).reshape(-1)[0])


def optimizer_step(params, lr, mode="sgd", optimizer=None):
    """One update of every parameter in ``params``; returns the optimizer used."""
    opt = optimizer if optimizer is not None else Optimizer(params, lr, mode)
    opt.step()
    return opt
