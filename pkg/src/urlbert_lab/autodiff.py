"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and, when gradients are enabled, records its
parents together with a vector-Jacobian product closure.  ``backward`` walks
the graph in reverse topological order and accumulates gradients into
``.grad``; ``grad`` does the same without side effects and is used for probe
gradients (FGSM / VAT directions) that must not pollute parameter gradients.

Training runs in float32; gradient verification switches the whole engine to
float64 via ``precision("float64")`` because central finite differences are
unreliable at single precision.  Nothing here touches global RNG state:
stochastic ops (dropout) take an explicit seed.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_FLOAT32 = np.dtype(np.float32)
_FLOAT64 = np.dtype(np.float64)
_DTYPE = _FLOAT32
_GRAD_ENABLED = True

_MASK64 = (1 << 64) - 1


def default_dtype() -> np.dtype:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (_FLOAT32, _FLOAT64):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _DTYPE = dt


@contextmanager
def precision(dtype):
    """Temporarily switch the default element precision."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextmanager
def no_grad():
    """Disable graph recording (inference / frozen-encoder passes)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def make_rng(*keys: int) -> np.random.Generator:
    """Deterministic generator from a tuple of integer keys (no global state)."""
    return np.random.default_rng([int(k) & _MASK64 for k in keys])


class Tensor:
    """Array node in the autodiff graph."""

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _wrap(data: np.ndarray) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
        return t

    # -- basic properties -----------------------------------------------------

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
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff drivers -------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every reachable node."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        adjoints = _backprop(self, np.asarray(grad, dtype=self.data.dtype))
        for node, g in adjoints.items():
            node.grad = g if node.grad is None else node.grad + g

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _DTYPE
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def constant(data) -> Tensor:
    """Non-differentiable tensor in the current default dtype."""
    return Tensor(data, requires_grad=False)


def _node(data: np.ndarray, parents, vjp) -> Tensor:
    t = Tensor._wrap(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
    return t


def _topo_order(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
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
    return order


def _backprop(root: Tensor, seed_grad: np.ndarray) -> dict:
    """Run reverse accumulation; returns {node: adjoint} for requires_grad nodes."""
    order = _topo_order(root)
    adj: dict[int, np.ndarray] = {id(root): seed_grad}
    out: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        out[node] = g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adj[key] = pg if key not in adj else adj[key] + pg
    return out


def grad(output: Tensor, wrt: list, grad_output=None) -> list:
    """Gradients of a scalar output w.r.t. ``wrt`` without touching ``.grad``."""
    if grad_output is None:
        if output.data.size != 1:
            raise ValueError("grad() needs a scalar output or an explicit grad_output")
        grad_output = np.ones_like(output.data)
    adjoints = _backprop(output, np.asarray(grad_output, dtype=output.data.dtype))
    return [adjoints.get(w, np.zeros_like(w.data)) for w in wrt]


# -- shape utilities -------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape_error(op: str, *shapes) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


# -- elementwise arithmetic -------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise _shape_error("add", a.shape, b.shape)
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        data = a.data - b.data
    except ValueError:
        raise _shape_error("sub", a.shape, b.shape)
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise _shape_error("mul", a.shape, b.shape)
    return _node(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        data = a.data / b.data
    except ValueError:
        raise _shape_error("div", a.shape, b.shape)
    return _node(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    e = float(exponent)
    return _node(a.data ** e, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def safe_log(a, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient uses the clamped argument."""
    a = _as_tensor(a)
    clamped = np.maximum(a.data, floor)
    return _node(np.log(clamped), (a,), lambda g: (g / clamped * (a.data > floor),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # x*x*x, not x**3: numpy's float32 integer-power path is ~100x slower
    inner = _GELU_C * (x + _GELU_K * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + (3.0 * _GELU_K) * (x * x))
        return (g * (0.5 * (1.0 + t) + 0.5 * x * ((1.0 - t * t) * dinner)),)

    return _node(out, (a,), vjp)


# -- shape ops --------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    return _node(data, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    data = a.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _node(data, (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    data = a.data.swapaxes(ax1, ax2)
    return _node(data, (a,), lambda g: (g.swapaxes(ax1, ax2),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(ts), vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        pieces = np.split(g, len(ts), axis=axis)
        return tuple(p.reshape(t.data.shape) for p, t in zip(pieces, ts))

    return _node(data, tuple(ts), vjp)


def take(a, idx) -> Tensor:
    """Basic indexing (ints / slices); gradient scatters back."""
    a = _as_tensor(a)
    data = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(data, (a,), vjp)


# -- reductions -------------------------------------------------------------------


def _restore_dims(g, src_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, src_shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(src_shape) for ax in axes)
        shape = list(src_shape)
        for ax in axes:
            shape[ax] = 1
        g = g.reshape(shape)
    return np.broadcast_to(g, src_shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    return _node(data, (a,), lambda g: (_restore_dims(g, a.data.shape, axis, keepdims).copy(),))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / data.size

    def vjp(g):
        return (_restore_dims(g, a.data.shape, axis, keepdims) / count,)

    return _node(data, (a,), vjp)


def _extreme(a, axis, keepdims, fn, argfn):
    a = _as_tensor(a)
    data = fn(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        # gradient routed to the first extremal element along the axis
        if axis is None:
            ga = np.zeros_like(a.data)
            flat_idx = argfn(a.data)
            ga.reshape(-1)[flat_idx] = g
            return (ga,)
        idx = argfn(a.data, axis=axis)
        onehot = np.zeros_like(a.data)
        np.put_along_axis(onehot, np.expand_dims(idx, axis), 1.0, axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (onehot * gg,)

    return _node(data, (a,), vjp)


def amax(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.max, np.argmax)


def amin(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.min, np.argmin)


# -- neural-net primitives --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise _shape_error("matmul (needs ndim >= 2)", a.shape, b.shape)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return (ga, gb)

    return _node(data, (a, b), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; -inf entries get exactly zero probability."""
    a = _as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), vjp)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise affine."""
    a = _as_tensor(a)
    gain = _as_tensor(gain, like=a)
    bias = _as_tensor(bias, like=a)
    if gain.data.shape != (a.data.shape[-1],) or bias.data.shape != (a.data.shape[-1],):
        raise _shape_error("layer_norm affine", a.shape, gain.shape, bias.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(a.data.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return (dx, dgain, dbias)

    return _node(out, (a, gain, bias), vjp)


def dropout(a, p: float, seed) -> Tensor:
    """Inverted dropout: keep with probability 1-p, scale kept values by 1/(1-p)."""
    a = _as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0,1), got {p}")
    if p == 0.0:
        return _node(a.data, (a,), lambda g: (g,))
    if seed is None:
        raise ValueError("dropout with p > 0 needs an explicit seed")
    keys = seed if isinstance(seed, (tuple, list)) else (seed,)
    rng = make_rng(*keys)
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype)
    scale = keep / (1.0 - p)
    return _node(a.data * scale, (a,), lambda g: (g * scale,))


def embedding_lookup(table, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"embedding_lookup: id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(data, (table,), vjp)


def cross_entropy(logits, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over rows whose target != ignore_index.

    ``logits`` is (N, C); -inf entries are legal and receive zero probability.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise _shape_error("cross_entropy", logits.shape, targets.shape)
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: no contributing targets")
    tv = targets[valid]
    n_classes = logits.data.shape[1]
    if tv.min() < 0 or tv.max() >= n_classes:
        raise ValueError(f"cross_entropy: target out of range [0, {n_classes})")
    m = np.max(logits.data, axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, tv].sum() / n_valid
    out = np.asarray(loss, dtype=logits.data.dtype)

    def vjp(g):
        p = np.exp(logp)
        gl = np.zeros_like(logits.data)
        gl[rows] = p[rows]
        gl[rows, tv] -= 1.0
        return (gl * (g / n_valid),)

    return _node(out, (logits,), vjp)


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Rows scaled to unit l2 norm; zero-norm rows are an error."""
    a = _as_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norms == 0.0):
        raise ValueError("l2_normalize: zero-norm vector")
    out = a.data / norms

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / norms,)

    return _node(out, (a,), vjp)


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` (a constant bool array) is True."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data)

    def vjp(g):
        return (_unbroadcast(np.where(mask, 0.0, g), a.data.shape),)

    return _node(data, (a,), vjp)
