"""Dense fp64 tensors with tape-based reverse-mode differentiation.

Everything in the model is assembled from the primitives here. Ops run on
plain numpy arrays; when a Tape is active on the current thread each op
records how to push gradients back to its inputs. Without an active tape
the same ops run as cheap forward-only numpy calls, which is what the
finite-difference checks and beam-search generation use.

Floats are 64-bit throughout: at desk scale speed does not matter and
fp64 keeps the gradient checks clean.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operands have incompatible shapes; names the shapes."""


_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    """A dense fp64 array plus identity for gradient bookkeeping."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # arithmetic sugar used all over the model code
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of ops; one backward pass visits each record once.

    A tape is confined to the thread that opened it. Independent tapes on
    separate threads may read the same parameter tensors concurrently.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, inputs, backward):
        self._records.append((out, inputs, backward))

    def gradients(self, loss: Tensor, wrt) -> list[np.ndarray]:
        """Backpropagate from a scalar loss; returns one gradient per tensor
        in ``wrt``, zero-filled for tensors the loss never touched."""
        if loss.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not isinstance(inp, Tensor):
                    continue
                acc = grads.get(id(inp))
                if acc is None:
                    # backward closures may hand the same array to several
                    # inputs, so never mutate a stored gradient in place
                    grads[id(inp)] = (gi if gi.shape == inp.data.shape
                                      else np.broadcast_to(gi, inp.data.shape))
                else:
                    grads[id(inp)] = acc + gi
        return [np.array(grads[id(p)]) if id(p) in grads else np.zeros_like(p.data)
                for p in wrt]


def backward(loss: Tensor, wrt, tape: Tape | None = None) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. the given parameter tensors."""
    tape = tape if tape is not None else _active_tape()
    if tape is None:
        raise RuntimeError("backward called with no tape")
    return tape.gradients(loss, wrt)


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


_tensor_new = Tensor.__new__


def _wrap(data) -> Tensor:
    # internal fast path: `data` is already a float64 ndarray
    t = _tensor_new(Tensor)
    t.data = data
    return t


def _emit(out_data, inputs, backward):
    out = _tensor_new(Tensor)
    out.data = out_data
    tape = getattr(_state, "tape", None)
    if tape is not None:
        tape._records.append((out, inputs, backward))
    return out


def add(a, b) -> Tensor:
    # constants (floats, fixed masks) skip tensor wrapping entirely
    if type(b) is not Tensor:
        if type(a) is not Tensor:
            return Tensor(np.asarray(a) + b)
        out = a.data + b
        return _emit(out, (a,), lambda g: (_unbroadcast(g, a.data.shape),))
    if type(a) is not Tensor:
        out = a + b.data
        return _emit(out, (b,), lambda g: (_unbroadcast(g, b.data.shape),))
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: {a.data.shape} vs {b.data.shape}") from None
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    if type(b) is not Tensor:
        if type(a) is not Tensor:
            return Tensor(np.asarray(a) - b)
        out = a.data - b
        return _emit(out, (a,), lambda g: (_unbroadcast(g, a.data.shape),))
    if type(a) is not Tensor:
        out = a - b.data
        return _emit(out, (b,), lambda g: (_unbroadcast(-g, b.data.shape),))
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: {a.data.shape} vs {b.data.shape}") from None
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    if type(b) is not Tensor:
        if type(a) is not Tensor:
            return Tensor(np.asarray(a) * b)
        out = a.data * b
        return _emit(out, (a,), lambda g: (_unbroadcast(g * b, a.data.shape),))
    if type(a) is not Tensor:
        out = a * b.data
        return _emit(out, (b,), lambda g: (_unbroadcast(g * a, b.data.shape),))
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: {a.data.shape} vs {b.data.shape}") from None
    return _emit(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                         _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    if type(b) is not Tensor:
        return mul(a, 1.0 / b if np.isscalar(b) else 1.0 / np.asarray(b))
    if type(a) is not Tensor:
        out = a / b.data
        return _emit(out, (b,),
                     lambda g: (_unbroadcast(-g * out / b.data, b.data.shape),))
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: {a.data.shape} vs {b.data.shape}") from None

    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _emit(out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim < 2:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}") from None

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _emit(out, (a, b), bwd)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(-x.data)
    out += 1.0
    np.reciprocal(out, out=out)
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax; rows sum to 1 and stay strictly positive
    for finite inputs."""
    x = as_tensor(x)
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (x,), bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(out)
    out -= np.log(e.sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (x,), bwd)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _emit(out, (x,), bwd)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat axis {axis}: {[t.data.shape for t in tensors]}"
        ) from None
    def bwd(g):
        sizes = [t.data.shape[axis] for t in tensors]
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _emit(out, tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit(out, tuple(tensors), bwd)


def slice_(x, key) -> Tensor:
    """Basic numpy slicing; gradients scatter back into a zero array."""
    x = as_tensor(x)
    out = x.data[key]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _emit(out, (x,), bwd)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _emit(out, (x,), lambda g: (g.reshape(x.data.shape),))


def gather_rows(table, ids) -> Tensor:
    """Row lookup (embedding). ids is an integer array; gradient is a
    scatter-add back onto the table."""
    table = as_tensor(table)
    idx = np.asarray(ids)
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit(out, (table,), bwd)


def gather_index(x, ids, axis: int = -1) -> Tensor:
    """Pick one element along `axis` per leading index (for CE targets)."""
    x = as_tensor(x)
    idx = np.asarray(ids)
    if x.data.ndim == 2 and (axis == -1 or axis == 1) and idx.ndim == 1:
        rows = np.arange(x.data.shape[0])
        out = x.data[rows, idx]

        def bwd(g):
            gx = np.zeros_like(x.data)
            gx[rows, idx] = g
            return (gx,)

        return _emit(out, (x,), bwd)
    taken = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    out = np.squeeze(taken, axis=axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit(out, (x,), bwd)


def weighted_sum(w, v) -> Tensor:
    """Sum of vectors v (..., T, D) weighted by w (..., T) -> (..., D)."""
    w, v = as_tensor(w), as_tensor(v)
    if w.data.shape != v.data.shape[:-1]:
        raise ShapeError(f"weighted_sum: weights {w.data.shape} vs values {v.data.shape}")
    out = (w.data[..., None, :] @ v.data)[..., 0, :]

    def bwd(g):
        gw = (g[..., None, :] @ np.swapaxes(v.data, -1, -2))[..., 0, :]
        gv = w.data[..., None] * g[..., None, :]
        return gw, gv

    return _emit(out, (w, v), bwd)


def max_over_pieces(x, axis: int = -2) -> Tensor:
    """Max-reduce over one axis; the gradient flows to the argmax piece,
    ties broken toward the lowest piece index (argmax keeps the first)."""
    x = as_tensor(x)
    out = x.data.max(axis=axis)

    def bwd(g):
        arg = np.argmax(x.data, axis=axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis),
                          np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit(out, (x,), bwd)


def stop_gradient(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data)


_KINDS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice_,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "mean": mean,
    "weighted-sum": weighted_sum,
    "max-over-pieces": max_over_pieces,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one named primitive; the building blocks of the whole model."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if min(lr, beta1, beta2, eps) <= 0 and lr != 0.0:
            raise ValueError("Adam hyperparameters must be positive")
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place. Returns (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params/grads/state length mismatch")
    for p, g in zip(params, grads):
        if p.data.shape != g.shape:
            raise ShapeError(f"adam_step: param {p.data.shape} vs grad {g.shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# verification


def finite_difference(loss_fn, params, eps: float = 1e-5, elements=None):
    """Central finite differences of loss_fn() w.r.t. each param tensor.

    loss_fn is called with no arguments and must read the live param data;
    it runs without a tape. `elements` limits the flat indices probed per
    tensor (None = all).
    """
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        idx = range(flat.size) if elements is None else elements(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn()
            flat[i] = orig - eps
            lo = loss_fn()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * eps)
        grads.append(g.reshape(p.data.shape))
    return grads


def max_relative_error(analytic, numeric, floor: float = 1e-5) -> float:
    """max |a-n| / max(|a|, |n|, floor) over all elements of all tensors.

    The floor absorbs central-difference round-off on near-zero entries
    (about |loss| * 1e-16 / eps in absolute terms); entries above the floor
    are compared at full relative precision.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
