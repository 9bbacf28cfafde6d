"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Every tensor produced by a kernel records a :class:`TapeNode` when at least
one input requires gradients.  :func:`backward` walks the recorded graph in
reverse topological order and hands the result to the leaves.

Broadcasting is deliberately narrow.  Binary kernels accept operands of equal
shape, a scalar operand, a bias vector matching the last dimension, or a
column of shape ``(..., 1)`` matching everything but the last dimension.
Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import threading
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import (
    ContractError,
    DomainError,
    GradientCheckError,
    ShapeError,
    TapeStateError,
)

__all__ = [
    "Tensor",
    "TapeNode",
    "ParameterSet",
    "no_grad",
    "as_tensor",
    "detach",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "concat",
    "stack",
    "index",
    "reshape",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "power",
    "clamp_min",
    "sum",
    "mean",
    "max",
    "backward",
    "grad_check",
    "save_parameters",
    "load_parameters",
]

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple
    backward: Callable | None
    spent: bool = field(default=False)


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node = None

    @classmethod
    def _wrap(cls, data, requires_grad=False):
        t = object.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        t._node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def op(self):
        return None if self._node is None else self._node.op

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self.op}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return len(self.data)

    # operator sugar; every path ends in a module-level kernel
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def sqrt(self):
        return sqrt(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def detach(x):
    """Return a constant view of ``x``; gradients never flow through it."""
    return Tensor._wrap(as_tensor(x).data)


def _result(data, op, inputs, backward_fn):
    requires = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires)
    if requires:
        out._node = TapeNode(op, tuple(inputs), backward_fn)
    return out


# ---------------------------------------------------------------- broadcasting


def _fits_into(big, small):
    if small == big or small in ((), (1,)):
        return True
    if not big:
        return False
    if small == big[-1:]:
        return True
    return len(small) == len(big) and small == big[:-1] + (1,)


def _broadcast_shape(op, a, b):
    sa, sb = a.shape, b.shape
    if _fits_into(sa, sb):
        return sa
    if _fits_into(sb, sa):
        return sb
    raise ShapeError(f"{op}: cannot combine shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if shape == (1,):
        return g.sum().reshape(1)
    if len(shape) == 1:
        return g.reshape(-1, shape[0]).sum(axis=0)
    return g.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- kernels


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: division by zero")
    out = ad / bd
    return _result(out, "div", (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def scale(a, c):
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def neg(a):
    return scale(a, -1.0)


def matmul(a, b):
    """``a @ b`` with ``b`` two-dimensional and ``a`` of rank >= 1."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, bd.shape[0]).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return _result(ad @ bd, "matmul", (a, b), back)


def concat(tensors: Sequence, axis=-1):
    """Concatenate along the last dimension."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat: empty input")
    ref = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != ref:
            raise ShapeError(f"concat: leading shapes differ, {ts[0].shape} vs {t.shape}")
    if axis not in (-1, ts[0].ndim - 1):
        raise ShapeError(f"concat: only the last axis is supported, got axis={axis}")
    splits = np.cumsum([t.shape[-1] for t in ts])[:-1]
    return _result(np.concatenate([t.data for t in ts], axis=-1), "concat", ts,
                   lambda g: tuple(np.split(g, splits, axis=-1)))


def stack(tensors: Sequence, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("stack: empty input")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: shapes differ, {ts[0].shape} vs {t.shape}")
    n = len(ts)
    return _result(np.stack([t.data for t in ts], axis=axis), "stack", ts,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def _is_basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in parts)


def index(a, key):
    """Slicing and integer-array gathering (numpy indexing semantics)."""
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError(f"index: {exc} for shape {a.shape}") from None
    shape = a.shape
    basic = _is_basic_key(key)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result(out.copy() if basic else out, "index", (a,), back)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(old),))


def sigmoid(a):
    a = as_tensor(a)
    s = 0.5 * np.tanh(0.5 * a.data) + 0.5
    return _result(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.data)
    return _result(e, "exp", (a,), lambda g: (g * e,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    d = a.data
    return _result(np.log(d), "log", (a,), lambda g: (g / d,))


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("sqrt: input must be strictly positive")
    r = np.sqrt(a.data)
    return _result(r, "sqrt", (a,), lambda g: (g * 0.5 / r,))


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    d = a.data
    return _result(d ** p, "power", (a,), lambda g: (g * p * d ** (p - 1.0),))


def clamp_min(a, lo):
    """``max(a, lo)`` elementwise; the gradient is cut where the clamp is active."""
    a = as_tensor(a)
    keep = a.data > lo
    # np.maximum propagates NaN, so a poisoned input is not silently floored
    return _result(np.maximum(a.data, lo), "clamp_min", (a,), lambda g: (g * keep,))


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,),
                   lambda g: (_expand(g, shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else shape[axis]
    return _result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), "mean", (a,),
                   lambda g: (_expand(g / n, shape, axis, keepdims).copy(),))


def max(a, axis=None, keepdims=False):
    """Reduction maximum; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    d = a.data
    if axis is None:
        flat = int(np.argmax(d))
        out = np.asarray(d.reshape(-1)[flat])
        if keepdims:
            out = out.reshape((1,) * d.ndim)

        def back(g):
            full = np.zeros(d.size)
            full[flat] = float(np.asarray(g).reshape(-1)[0])
            return (full.reshape(d.shape),)

        return _result(out, "max", (a,), back)

    am = np.expand_dims(np.argmax(d, axis=axis), axis)
    out = np.take_along_axis(d, am, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def back(g):
        full = np.zeros(d.shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, am, gg, axis=axis)
        return (full,)

    return _result(out, "max", (a,), back)


# ---------------------------------------------------------------- backward


def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        t, done = stack_.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        node = t._node
        if node is not None:
            for inp in node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack_.append((inp, False))
    return order


def backward(loss, params=None, retain_graph=False):
    """Back-propagate a scalar ``loss``.

    Leaf tensors reached by the tape get their ``grad`` incremented (fan-out
    and repeated calls accumulate; callers zero between steps).  Returns a
    mapping from parameter name to the gradient produced by *this* call;
    parameters the tape never reached map to exact zeros.  Unless
    ``retain_graph`` is set the tape is consumed and a second call on the
    same graph raises :class:`TapeStateError`.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward: loss must be a scalar tensor, got shape {shape}")
    if loss._node is None:
        if loss.requires_grad:
            order = [loss]
        else:
            raise ContractError("backward: loss does not depend on any tensor requiring grad")
    else:
        if loss._node.spent:
            raise TapeStateError("backward: tape already consumed; run the forward pass again")
        order = _topo_order(loss)

    grads = {id(loss): np.ones(loss.shape)}
    leaves = []
    for t in reversed(order):
        node = t._node
        if node is None:
            leaves.append(t)
            continue
        if node.spent:
            raise TapeStateError(f"backward: node '{node.op}' belongs to a consumed tape")
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi

    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        grads[id(leaf)] = g
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    if not retain_graph:
        for t in order:
            if t._node is not None:
                t._node.spent = True
                t._node.backward = None

    if params is None:
        return {}
    return {name: np.array(grads.get(id(p), np.zeros(p.shape)), dtype=np.float64)
            for name, p in params.items()}


# ---------------------------------------------------------------- parameters


class ParameterSet(Mapping):
    """Name-keyed trainable tensors, iterated in sorted name order."""

    def __init__(self, tensors=None):
        self._tensors = {}
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._tensors:
            raise ContractError(f"duplicate parameter name '{name}'")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._tensors[name] = t
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __iter__(self):
        return iter(sorted(self._tensors))

    def __len__(self):
        return len(self._tensors)

    def __repr__(self):
        inner = ", ".join(f"{k}: {self._tensors[k].shape}" for k in self)
        return f"ParameterSet({inner})"

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def arrays(self):
        return {name: self._tensors[name].data for name in self}

    def copy(self):
        return ParameterSet({name: Tensor(self._tensors[name].data) for name in self})

    def subset(self, prefix):
        return ParameterSet({n: self._tensors[n] for n in self if n.startswith(prefix)})

    def digest(self):
        h = hashlib.sha256()
        for name in self:
            d = np.asarray(self._tensors[name].data, dtype="<f8", order="C")
            h.update(name.encode())
            h.update(repr(d.shape).encode())
            h.update(d.tobytes())
        return h.hexdigest()

    def num_values(self):
        return int(np.sum([t.size for t in self._tensors.values()]))


_MAGIC = b"CROSSDISTILL-PARAMS 1\n"


def save_parameters(path, params: ParameterSet, header=None):
    """Write ``params`` to ``path``.

    Layout: a magic line, one JSON line (``header`` plus the tensor table with
    name, shape and byte offset), then the raw little-endian float64 payload.
    The output is a pure function of its inputs.
    """
    table, blobs, offset = [], [], 0
    for name in params:
        d = np.asarray(params[name].data, dtype="<f8", order="C")
        table.append({"name": name, "shape": list(d.shape), "offset": offset})
        blobs.append(d.tobytes())
        offset += d.nbytes
    meta = json.dumps({"header": header or {}, "tensors": table}, sort_keys=True,
                      separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(meta.encode() + b"\n")
        for b in blobs:
            fh.write(b)


def load_parameters(path):
    """Inverse of :func:`save_parameters`; returns ``(params, header)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(_MAGIC):
        raise ContractError(f"{path}: not a parameter checkpoint")
    rest = raw[len(_MAGIC):]
    nl = rest.index(b"\n")
    meta = json.loads(rest[:nl])
    payload = rest[nl + 1:]
    params = ParameterSet()
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=start).reshape(shape)
        params.add(entry["name"], Tensor(arr.astype(np.float64)))
    return params, meta["header"]


# ---------------------------------------------------------------- verification


def _scalar_value(f, params, name, i):
    with no_grad():
        out = f(params)
    v = float(as_tensor(out).data.reshape(-1)[0]) if as_tensor(out).size == 1 else np.nan
    if not np.isfinite(v):
        raise GradientCheckError(f"non-finite objective while probing {name}[{i}]")
    return v


def grad_check(f: Callable[[ParameterSet], Tensor], params: ParameterSet, h=1e-5, tol=None,
               names: Iterable[str] | None = None):
    """Compare analytic gradients of ``f`` against central differences.

    Returns the largest ``|analytic - numeric| / max(1, |analytic|)`` over
    every entry of every parameter (or of ``names`` only).  With ``tol`` set,
    exceeding it raises :class:`GradientCheckError`.
    """
    if h <= 0:
        raise ContractError("grad_check: step h must be positive")
    for p in params.values():
        p.grad = None
    loss = f(params)
    if not np.all(np.isfinite(as_tensor(loss).data)):
        raise GradientCheckError("non-finite objective at the base point")
    analytic = backward(loss, params)
    worst = 0.0
    for name in (names if names is not None else params):
        p = params[name]
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ContractError(f"grad_check: parameter {name} is not contiguous")
        an = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar_value(f, params, name, i)
            flat[i] = orig - h
            fm = _scalar_value(f, params, name, i)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(an[i] - num) / np.maximum(1.0, abs(an[i]))
            worst = np.maximum(worst, err)
    worst = float(worst)
    if tol is not None and worst > tol:
        raise GradientCheckError(f"max relative gradient error {worst:.3e} exceeds {tol:.1e}")
    return worst
