"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation produces a :class:`Tensor` that remembers its
parents and a closure propagating the output gradient back to them.  When a
:class:`Tape` is active, produced tensors are also appended to it in
recording order, and :func:`backward` can replay that order in reverse.
Without a tape the order is recovered by a topological sort from the loss.

The dtype of the inputs is preserved: models train in float32, gradient
checks run the same code in float64.
"""

from __future__ import annotations

import contextlib
import numpy as np

from .exceptions import DegenerateVectorError, DimensionError

MAX_RANK = 3
EPS_NORM = 1e-12

_TAPES: list["Tape"] = []
_GRAD_ENABLED = [True]


class Tape:
    """Ordered record of the operations executed while the tape is active."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        return backward(loss, tape=self)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled():
    return _GRAD_ENABLED[-1]


class Tensor:
    """Dense array of rank 0..3 with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds {MAX_RANK} (shape {arr.shape})")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{label})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ----------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = np.float64
    return Tensor(x, dtype=dtype)


def _coerce_pair(a, b):
    """Wrap python scalars / arrays, matching the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        if _TAPES:
            _TAPES[-1].nodes.append(out)
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b):
    a, b = _coerce_pair(a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _coerce_pair(a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _coerce_pair(a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _coerce_pair(a, b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out_data / b.data, b.shape))

    return _make(out_data, (a, b), bw)


def power(a, p):
    p = float(p)

    def bw(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _make(a.data ** p, (a,), bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), bw)


def log(a):
    def bw(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def tanh(a):
    out_data = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a):
    out_data = _sigmoid(a.data)

    def bw(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return _make(a.data * mask, (a,), bw)


# -- shape / reduction -------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes=None):
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        _accumulate(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bw)


def take(a, idx):
    """Basic or advanced indexing; the backward pass scatter-adds."""

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(a.data[idx], (a,), bw)


def gather_rows(a, index, axis=0):
    """Select entries of ``a`` along ``axis`` with an integer index array."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(full, index, g)
        elif axis == 1 and index.ndim == 1:
            np.add.at(full, (slice(None), index), g)
        else:
            np.add.at(full, _axis_index(index, axis, a.ndim), g)
        _accumulate(a, full)

    if axis == 0 or index.ndim == 1:
        data = np.take(a.data, index, axis=axis)
    else:
        data = a.data[_axis_index(index, axis, a.ndim)]
    return _make(data, (a,), bw)


def _axis_index(index, axis, ndim):
    # per-batch index along axis 1: index has shape (B, K)
    if axis != 1 or index.ndim != 2:
        raise DimensionError(f"unsupported gather layout axis={axis}, index rank {index.ndim}")
    rows = np.arange(index.shape[0])[:, None]
    return (rows, index)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        for k, t in enumerate(tensors):
            _accumulate(t, np.take(g, k, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def unstack(a, axis=0):
    """Split ``a`` along ``axis`` into a list of tensors.

    Each piece writes its gradient into its own slice of the parent buffer,
    so a long sequence costs linear rather than quadratic time to backprop.
    """
    a = as_tensor(a)
    moved = np.moveaxis(a.data, axis, 0)

    def piece(k):
        def bw(g):
            if not a.requires_grad:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.moveaxis(a.grad, axis, 0)[k] += g

        return _make(moved[k].copy(), (a,), bw)

    return [piece(k) for k in range(moved.shape[0])]


def broadcast_to(a, shape):
    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), bw)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = _coerce_pair(a, b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if b.ndim != 2:
        raise DimensionError(f"matmul right operand must be a matrix, got shape {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            if a.ndim == 1:
                _accumulate(b, np.outer(a.data, g))
            else:
                a2 = a.data.reshape(-1, a.shape[-1])
                _accumulate(b, a2.T @ g.reshape(-1, g.shape[-1]))

    return _make(a.data @ b.data, (a, b), bw)


def l2_normalize(v, axis=-1, eps=EPS_NORM):
    """Project onto the unit sphere along ``axis``.

    The norm is guarded by ``eps`` before division; vectors whose norm does
    not exceed ``eps`` are rejected rather than silently renormalised.
    """
    v = as_tensor(v)
    norm = np.sqrt(np.sum(v.data * v.data, axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateVectorError(f"cannot normalise a vector with norm <= {eps:g}")
    denom = norm + eps
    out_data = v.data / denom

    def bw(g):
        # d/dv [v / (|v| + eps)] = I/denom - v v^T / (|v| denom^2)
        proj = np.sum(g * v.data, axis=axis, keepdims=True)
        _accumulate(v, g / denom - v.data * proj / (norm * denom * denom))

    return _make(out_data, (v,), bw)


def logsumexp(a, axis=-1, keepdims=False):
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = np.sum(shifted, axis=axis, keepdims=True)
    out_full = m + np.log(s)
    soft = shifted / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * soft)

    out = out_full if keepdims else np.squeeze(out_full, axis=axis)
    return _make(out, (a,), bw)


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of row-wise softmax against integer ``labels``."""
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    lse = logsumexp(logits, axis=-1)
    picked = gather_rows(logits.reshape(-1), np.arange(n) * logits.shape[1] + labels)
    per_row = lse - picked
    if reduction == "sum":
        return tsum(per_row)
    if reduction == "none":
        return per_row
    return tmean(per_row)


def lstm_cell(x, h, c, W, U, b):
    """One LSTM step with gates ordered (input, forget, candidate, output).

    ``x`` is (B, d_in) or (d_in,), ``h``/``c`` are (B, d_h) or (d_h,),
    ``W`` is (d_in, 4 d_h), ``U`` is (d_h, 4 d_h), ``b`` is (4 d_h,).
    Returns ``(h_next, c_next)``; both share one fused backward closure.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    d_h = U.shape[0]
    if W.shape[0] != x.shape[-1] or W.shape[1] != 4 * d_h or U.shape[1] != 4 * d_h:
        raise DimensionError(
            f"lstm parameter shapes W{W.shape} U{U.shape} inconsistent with x{x.shape}, d_h={d_h}"
        )
    if h.shape[-1] != d_h or c.shape[-1] != d_h or b.shape != (4 * d_h,):
        raise DimensionError(f"lstm state shapes h{h.shape} c{c.shape} b{b.shape} for d_h={d_h}")

    z = x.data @ W.data + h.data @ U.data + b.data
    act = _sigmoid(z)
    i = act[..., :d_h]
    f = act[..., d_h:2 * d_h]
    o = act[..., 3 * d_h:]
    gg = np.tanh(z[..., 2 * d_h:3 * d_h])
    c_next = f * c.data + i * gg
    tc = np.tanh(c_next)
    h_next = o * tc

    parents = (x, h, c, W, U, b)
    track = _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(h_next), Tensor(c_next)

    # The two outputs feed one closure; whichever runs first waits for the
    # other so the gate gradient is formed once from both contributions.
    state = {"dh": None, "dc": None, "pending": 2}

    def flush():
        dh = state["dh"] if state["dh"] is not None else 0.0
        dc = state["dc"] if state["dc"] is not None else 0.0
        dc_total = dc + dh * o * (1.0 - tc * tc)
        dz = np.empty_like(z)
        dz[..., :d_h] = dc_total * gg * i * (1.0 - i)
        dz[..., d_h:2 * d_h] = dc_total * c.data * f * (1.0 - f)
        dz[..., 2 * d_h:3 * d_h] = dc_total * i * (1.0 - gg * gg)
        dz[..., 3 * d_h:] = dh * tc * o * (1.0 - o)
        if x.requires_grad:
            _accumulate(x, dz @ W.data.T)
        if h.requires_grad:
            _accumulate(h, dz @ U.data.T)
        if c.requires_grad:
            _accumulate(c, dc_total * f)
        x2 = x.data.reshape(-1, x.shape[-1])
        h2 = h.data.reshape(-1, d_h)
        dz2 = dz.reshape(-1, 4 * d_h)
        if W.requires_grad:
            _accumulate(W, x2.T @ dz2)
        if U.requires_grad:
            _accumulate(U, h2.T @ dz2)
        if b.requires_grad:
            _accumulate(b, dz2.sum(axis=0))

    def bw_h(g):
        state["dh"] = g
        state["pending"] -= 1
        if state["pending"] == 0:
            flush()

    def bw_c(g):
        state["dc"] = g
        state["pending"] -= 1
        if state["pending"] == 0:
            flush()

    # c_next is recorded first so that in reverse order h_next is visited
    # first; both must run even when one output is unused.
    bw_h.fused = bw_c.fused = True
    c_out = _make(c_next, parents, bw_c)
    h_out = _make(h_next, parents, bw_h)
    h_out._parents = parents + (c_out,)
    return h_out, c_out


# -- backward ------------------------------------------------------------------

def _topological(loss):
    order, seen = [], set()
    stack = [(loss, False)]
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
            if id(p) not in seen and p._backward is not None:
                stack.append((p, False))
    return order


def backward(loss, tape=None, params=None):
    """Propagate d(loss)/d(.) into ``.grad`` of every tensor requiring it.

    Nodes are visited once each, in reverse recording order (the tape's, or a
    topological order rebuilt from ``loss``).  Returns a dict mapping each
    entry of ``params`` (name -> Tensor) to its gradient; parameters the loss
    does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape is not None:
        if not any(n is loss for n in tape.nodes):
            raise ValueError("loss was not recorded on the given tape")
        nodes = tape.nodes
    else:
        nodes = _topological(loss)

    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(nodes):
        if node._backward is None:
            continue
        g = node.grad
        if g is None:
            if getattr(node._backward, "fused", False):
                g = np.zeros_like(node.data)
            else:
                continue
        node._backward(g)

    if params is None:
        return None
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def zero_grad(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None
