"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape every op is a plain numpy
computation, which is what inference uses.

    with Tape() as tape:
        loss = (x @ w).sum()
    grads = tape.backward(loss)
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

_TAPES: list["Tape"] = []


class GradientError(RuntimeError):
    """Raised when the recorded graph or a gradient violates an invariant."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "name", "_slot")
    __array_ufunc__ = None  # make numpy defer to Tensor's reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name
        self._slot: tuple[int, int] | None = None

    # numpy-ish conveniences
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A named leaf tensor that always requires a gradient."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


class Tape:
    """Records differentiable operations in creation order.

    Creation order is a topological order of the graph, so ``backward`` is a
    single reverse sweep that visits every node at most once.
    """

    _counter = 0

    def __init__(self):
        Tape._counter += 1
        self.id = Tape._counter
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out: Tensor):
        out._slot = (self.id, len(self.nodes))
        self.nodes.append(out)

    def backward(self, loss: Tensor, accumulate: bool = True) -> dict[str, np.ndarray]:
        """Propagate d(loss)/d(.) to every Parameter reachable from ``loss``.

        Gradients are added into ``Parameter.grad`` when ``accumulate`` is set;
        the returned dict maps parameter name to its gradient from this call.
        """
        if loss.data.size != 1:
            raise GradientError(f"loss must be scalar, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise GradientError("loss is not finite")
        if loss._slot is None or loss._slot[0] != self.id:
            raise GradientError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
        visited = set()
        for pos in range(loss._slot[1], -1, -1):
            node = self.nodes[pos]
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in visited:
                raise GradientError("node visited twice during backward")
            visited.add(id(node))
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._slot is not None:
                    if parent._slot[0] != self.id or parent._slot[1] >= pos:
                        raise GradientError("cycle or foreign node in recorded graph")
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
                else:
                    key = id(parent)
                    if key in leaf_grads:
                        leaf_grads[key] = (parent, leaf_grads[key][1] + pg)
                    else:
                        leaf_grads[key] = (parent, pg)

        out = {}
        for leaf, g in leaf_grads.values():
            if accumulate:
                if leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)
                leaf.grad = leaf.grad + g
            out[leaf.name or str(id(leaf))] = g
        return out


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    return tape.backward(loss)


# ----------------------------------------------------------------------------
# plumbing


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.parents = tuple(inputs)
        out.backward_fn = backward_fn
        _TAPES[-1].record(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float):
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a):
    """log(sigmoid(a)) without overflow for large |a|."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    sig_neg = 0.5 * (1.0 - np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * sig_neg,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# ----------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def index_select(a, index):
    """``a[index]`` for any numpy index; backward scatter-adds into the source."""
    a = as_tensor(a)
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def take(a, indices, axis: int = 0):
    """Gather along one axis. Repeated indices accumulate gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        src = np.moveaxis(a.data, axis, 0)
        rest = src.shape[1:]
        g2 = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)),
                         tuple(range(indices.ndim)))
        g2 = g2.reshape(indices.size, -1)
        full = _scatter_rows(indices.ravel(), g2, src.shape[0])
        return (np.moveaxis(full.reshape((src.shape[0],) + rest), 0, axis),)

    return _make(out, (a,), bw)


def _scatter_rows(idx: np.ndarray, g2: np.ndarray, n_rows: int) -> np.ndarray:
    """full[idx[i]] += g2[i] for a 2-D ``g2``; picks the fastest strategy for the shape."""
    if idx.size <= 64:
        full = np.zeros((n_rows, g2.shape[1]), dtype=g2.dtype)
        for i, r in enumerate(idx):
            full[r] += g2[i]
        return full
    if g2.shape[1] <= 16:
        cols = [np.bincount(idx, weights=g2[:, c], minlength=n_rows) for c in range(g2.shape[1])]
        return np.stack(cols, axis=1).astype(g2.dtype)
    full = np.zeros((n_rows, g2.shape[1]), dtype=g2.dtype)
    np.add.at(full, idx, g2)
    return full


def gather_rows(a, idx):
    """Per-batch row gather: ``out[b, k] = a[b, idx[b, k]]`` for a of shape (B, n, ...)."""
    idx = np.asarray(idx)
    rows = np.arange(idx.shape[0])[:, None]
    return index_select(a, (rows, idx))


def concat(tensors: Sequence, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# ----------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 or b.ndim == 1:
        # promote vectors to matrices so backward only sees the 2-D+ case
        a2 = reshape(a, (1, -1)) if a.ndim == 1 else a
        b2 = reshape(b, (-1, 1)) if b.ndim == 1 else b
        out = matmul(a2, b2)
        shape = list(out.shape)
        if b.ndim == 1:
            del shape[-1]
        if a.ndim == 1:
            del shape[-1 if b.ndim == 1 else -2]
        return reshape(out, tuple(shape))
    out = np.matmul(a.data, b.data)

    def bw(g):
        if b.ndim == 2 and a.ndim >= 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def softmax(a, axis: int = -1, mask=None):
    """Softmax over ``axis``; entries where ``mask`` is False get probability 0.

    A row with no permitted entry is an error, never a silent zero row.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise GradientError("softmax row has no permitted entries")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a, axis: int = -1):
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps: float = 1e-6):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12):
    x = as_tensor(x)
    norm = power(tsum(x * x, axis=axis, keepdims=True) + eps, 0.5)
    return x / norm


# ----------------------------------------------------------------------------
# optimisation


class NonFiniteGradient(FloatingPointError):
    pass


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Weight decay applies to tensors of rank >= 2 only; biases, norms and
    scalars are not decayed.
    """

    def __init__(self, params: Iterable[Parameter], betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.02):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        bad = [p.name for p in self.params if not np.all(np.isfinite(p.grad))]
        if bad:
            raise NonFiniteGradient(f"non-finite gradient in {bad[:5]}; step rejected")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= (1.0 - lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.array([self.t], dtype=np.float32)}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        if "opt.t" not in tensors:
            return
        self.t = int(tensors["opt.t"][0])
        for name in self.m:
            self.m[name] = tensors[f"opt.m.{name}"].astype(self.m[name].dtype).copy()
            self.v[name] = tensors[f"opt.v.{name}"].astype(self.v[name].dtype).copy()


def sgd_step(params: Sequence[Parameter], lr: float, weight_decay: float = 0.02,
             optimizer: AdamW | None = None) -> AdamW:
    """One adaptive step over ``params`` using their accumulated ``.grad``."""
    opt = optimizer or AdamW(params, weight_decay=weight_decay)
    opt.weight_decay = weight_decay
    opt.step(lr)
    return opt


def cosine_lr(step: int, total: int, base_lr: float, warmup: int = 0,
              min_ratio: float = 0.0) -> float:
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return base_lr * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * progress)))
