"""Dense tensors with reverse-mode automatic differentiation.

Every operation that sees a gradient-requiring input records a backward
closure on the output node. Nodes carry a creation sequence number, so a
backward pass walks the reachable subgraph in reverse creation order,
which is a valid reverse-topological order because inputs always predate
their outputs. The graph lives only as long as the output tensors do;
training code rebuilds it every step.

float32 is the working precision; building a graph from float64 leaves
promotes everything to float64, which is what the finite-difference
checker does.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32

_node_counter = itertools.count()
_local = threading.local()  # recording is toggled per thread


def _recording():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    prev = _recording()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, np.ndarray):
            if dtype is not None:
                if data.dtype != dtype:
                    data = data.astype(dtype)
            elif data.dtype not in (np.float32, np.float64):
                data = data.astype(DEFAULT_DTYPE)
        else:
            data = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad) and _recording()
        self._parents = ()
        self._backward = None
        self._seq = next(_node_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the free functions do the real work
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dt = like.data.dtype if isinstance(like, Tensor) else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dt))


def _result(data, parents, backward):
    out = Tensor(data, dtype=data.dtype)
    if _recording():
        rg_parents = tuple(p for p in parents if p.requires_grad)
        if rg_parents:
            out.requires_grad = True
            out._parents = rg_parents
            out._backward = backward
    return out


def _acc(t, g):
    # g is freshly allocated; the node may take ownership
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _acc_shared(t, g):
    # g may alias another node's grad buffer or a view; copy on first write
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


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


def backward(loss):
    """Populate .grad on every gradient-requiring node reachable from loss."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward requires a scalar loss tensor")
    if not loss.requires_grad:
        return
    seen = {id(loss)}
    stack = [loss]
    nodes = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
                nodes.append(p)
    nodes.sort(key=lambda n: n._seq, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for node in nodes:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    def bw(g):
        if a.requires_grad:
            _acc_shared(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc_shared(b, _unbroadcast(g, b.data.shape))
    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    def bw(g):
        if a.requires_grad:
            _acc_shared(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, -_unbroadcast(g, b.data.shape))
    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))
    return _result(a.data * b.data, (a, b), bw)


def div(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data / b.data
    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * out_data / b.data, b.data.shape))
    return _result(out_data, (a, b), bw)


def neg(a):
    def bw(g):
        _acc(a, -g)
    return _result(-a.data, (a,), bw)


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs rank >= 2 operands, got shapes {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.data.shape} x {b.data.shape}")
    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))
    return _result(a.data @ b.data, (a, b), bw)


def transpose(a):
    def bw(g):
        _acc_shared(a, g.swapaxes(-1, -2))
    return _result(a.data.swapaxes(-1, -2), (a,), bw)


def reshape(a, shape):
    orig = a.data.shape
    def bw(g):
        _acc_shared(a, g.reshape(orig))
    return _result(a.data.reshape(shape), (a,), bw)


def exp(a):
    out_data = np.exp(a.data)
    def bw(g):
        _acc(a, g * out_data)
    return _result(out_data, (a,), bw)


def log(a):
    def bw(g):
        _acc(a, g / a.data)
    return _result(np.log(a.data), (a,), bw)


def sqrt(a):
    out_data = np.sqrt(a.data)
    def bw(g):
        _acc(a, g * (0.5 / out_data))
    return _result(out_data, (a,), bw)


def tanh(a):
    out_data = np.tanh(a.data)
    def bw(g):
        _acc(a, g * (1.0 - out_data * out_data))
    return _result(out_data, (a,), bw)


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    def bw(g):
        _acc(a, g * out_data * (1.0 - out_data))
    return _result(out_data, (a,), bw)


def relu(a):
    def bw(g):
        _acc(a, g * (a.data > 0))
    return _result(np.maximum(a.data, 0), (a,), bw)


def clip_min(a, floor):
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    def bw(g):
        _acc(a, g * (a.data > floor))
    return _result(np.maximum(a.data, floor), (a,), bw)


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    def bw(g):
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        _acc_shared(a, np.broadcast_to(g, shape))
    return _result(np.asarray(out_data), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else (
        np.prod([a.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]))
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    def bw(g):
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        _acc(a, np.broadcast_to(g, shape) / n)
    return _result(np.asarray(out_data), (a,), bw)


def softmax(a, axis=-1):
    """Stable softmax along axis; slices sum to one."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    def bw(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _acc(a, out_data * (g - inner))
    return _result(out_data, (a,), bw)


def log_softmax(a, axis=-1):
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log_softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    def bw(g):
        sm = np.exp(out_data)
        _acc(a, g - sm * g.sum(axis=axis, keepdims=True))
    return _result(out_data, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    base = list(tensors[0].data.shape)
    for t in tensors[1:]:
        other = list(t.data.shape)
        if len(other) != len(base) or any(
                o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)):
            raise DimensionError(
                f"concat extents differ off axis {axis}: "
                f"{tensors[0].data.shape} vs {t.data.shape}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def bw(g):
        pieces = np.split(g, offsets[1:-1], axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _acc_shared(t, piece)
    return _result(out_data, tuple(tensors), bw)


def slice_last(a, start, stop):
    """Narrow along the last axis: a[..., start:stop]."""
    def bw(g):
        z = np.zeros_like(a.data)
        z[..., start:stop] = g
        _acc(a, z)
    return _result(a.data[..., start:stop], (a,), bw)


def rows(a, ids):
    """Gather rows of a 2-D tensor: a[ids] with ids an int sequence."""
    ids = np.asarray(ids, dtype=np.intp)
    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z, ids, g)
        _acc(a, z)
    return _result(a.data[ids], (a,), bw)


def gather_last(a, ids):
    """Pick a[i, ids[i]] from a 2-D tensor; returns a rank-1 result."""
    ids = np.asarray(ids, dtype=np.intp)
    idx = np.arange(a.data.shape[0])
    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (idx, ids), g)
        _acc(a, z)
    return _result(a.data[idx, ids], (a,), bw)


# ---------------------------------------------------------------------------
# recurrent cells


@dataclass
class LSTMCellParams:
    """Packed gate weights, gate order i, f, g, o along the last axis."""
    w_x: Tensor  # [d_in, 4H]
    w_h: Tensor  # [H, 4H]
    b: Tensor    # [1, 4H]

    @classmethod
    def init(cls, rng, d_in, d_hidden, dtype=DEFAULT_DTYPE):
        return cls(
            w_x=Tensor(xavier_uniform(rng, d_in, 4 * d_hidden, dtype), requires_grad=True),
            w_h=Tensor(xavier_uniform(rng, d_hidden, 4 * d_hidden, dtype), requires_grad=True),
            b=Tensor(np.zeros((1, 4 * d_hidden), dtype=dtype), requires_grad=True),
        )

    def tensors(self):
        return [self.w_x, self.w_h, self.b]


@dataclass
class GRUCellParams:
    """Packed gate weights, gate order z, r, n along the last axis."""
    w_x: Tensor  # [d_in, 3H]
    w_h: Tensor  # [H, 3H]
    b: Tensor    # [1, 3H]

    @classmethod
    def init(cls, rng, d_in, d_hidden, dtype=DEFAULT_DTYPE):
        return cls(
            w_x=Tensor(xavier_uniform(rng, d_in, 3 * d_hidden, dtype), requires_grad=True),
            w_h=Tensor(xavier_uniform(rng, d_hidden, 3 * d_hidden, dtype), requires_grad=True),
            b=Tensor(np.zeros((1, 3 * d_hidden), dtype=dtype), requires_grad=True),
        )

    def tensors(self):
        return [self.w_x, self.w_h, self.b]


def lstm_cell(x, h_prev, c_prev, params):
    """One LSTM step: h = o * tanh(c), c = f * c_prev + i * g."""
    hidden = params.w_h.data.shape[0]
    if x.data.shape[-1] != params.w_x.data.shape[0]:
        raise DimensionError(
            f"lstm_cell input width {x.data.shape[-1]} != {params.w_x.data.shape[0]}")
    if h_prev.data.shape[-1] != hidden or c_prev.data.shape[-1] != hidden:
        raise DimensionError(
            f"lstm_cell state width {h_prev.data.shape[-1]}/{c_prev.data.shape[-1]} != {hidden}")
    gates = add(add(matmul(x, params.w_x), matmul(h_prev, params.w_h)), params.b)
    i = sigmoid(slice_last(gates, 0, hidden))
    f = sigmoid(slice_last(gates, hidden, 2 * hidden))
    g = tanh(slice_last(gates, 2 * hidden, 3 * hidden))
    o = sigmoid(slice_last(gates, 3 * hidden, 4 * hidden))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


def gru_cell(x, h_prev, params):
    """One GRU step: h = (1 - z) * n + z * h_prev."""
    hidden = params.w_h.data.shape[0]
    if x.data.shape[-1] != params.w_x.data.shape[0]:
        raise DimensionError(
            f"gru_cell input width {x.data.shape[-1]} != {params.w_x.data.shape[0]}")
    if h_prev.data.shape[-1] != hidden:
        raise DimensionError(
            f"gru_cell state width {h_prev.data.shape[-1]} != {hidden}")
    gx = add(matmul(x, params.w_x), params.b)
    gh = matmul(h_prev, params.w_h)
    z = sigmoid(add(slice_last(gx, 0, hidden), slice_last(gh, 0, hidden)))
    r = sigmoid(add(slice_last(gx, hidden, 2 * hidden), slice_last(gh, hidden, 2 * hidden)))
    n = tanh(add(slice_last(gx, 2 * hidden, 3 * hidden),
                 mul(r, slice_last(gh, 2 * hidden, 3 * hidden))))
    return add(mul(sub(1.0, z), n), mul(z, h_prev))


# ---------------------------------------------------------------------------
# initialization, optimizer, gradient checking


def xavier_uniform(rng, n_in, n_out, dtype=DEFAULT_DTYPE):
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)


class AdamState:
    """Bias-corrected Adam moments for a fixed parameter list."""

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0 or not (0 < beta1 < 1) or not (0 < beta2 < 1) or eps <= 0:
            raise ContractError("Adam hyperparameters out of range")
        self.params = list(params)
        self.step = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(params, state):
    """Apply one in-place Adam update and clear gradients."""
    params = list(params)
    if len(params) != len(state.params) or any(
            p is not q for p, q in zip(params, state.params)):
        raise ContractError("adam_step params do not match the optimizer state")
    for p in params:
        if p.grad is None:
            raise ContractError("adam_step: parameter is missing its gradient")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    total = np.sqrt(total)
    if max_norm is not None and total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def finite_diff_check(build_loss, params, step=1e-5):
    """Max relative disagreement between analytic and central-difference grads.

    build_loss must be a deterministic function of params. Returns inf when
    any compared value is non-finite.
    """
    params = list(params)
    loss = build_loss(params)
    backward(loss)
    analytic = [
        (p.grad.astype(np.float64).copy() if p.grad is not None else np.zeros_like(p.data, dtype=np.float64))
        for p in params
    ]
    for p in params:
        p.grad = None
    worst = 0.0
    with no_grad():
        for p, ag in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = ag.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                lp = float(build_loss(params).data)
                flat[i] = orig - step
                lm = float(build_loss(params).data)
                flat[i] = orig
                num = (lp - lm) / (2.0 * step)
                a = float(aflat[i])
                if not (np.isfinite(a) and np.isfinite(num)):
                    return float("inf")
                rel = abs(a - num) / max(1e-12, abs(a) + abs(num))
                worst = max(worst, rel)
    return worst
