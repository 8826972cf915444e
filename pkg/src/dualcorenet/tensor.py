"""Reverse-mode automatic differentiation over numpy arrays.

Every operation returns a new :class:`Tensor`.  When at least one input takes
part in differentiation, the result carries a :class:`Node` recording the
producing op, its inputs and a closure that maps the output gradient to input
gradients.  Node indices come from a global counter, so sorting reachable nodes
by index reproduces the order in which they were appended to the tape;
:func:`backward` walks that order in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32, "grad": True}
_node_counter = itertools.count()
_branch_log: list | None = None


def set_precision(mode: str) -> None:
    """Select the global floating point mode, ``"f32"`` or ``"f64"``."""
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[mode]


def get_dtype():
    return _state["dtype"]


def get_precision() -> str:
    return "f64" if _state["dtype"] is np.float64 else "f32"


@contextlib.contextmanager
def precision(mode: str):
    old = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


@contextlib.contextmanager
def branch_probe():
    """Collect the branch pattern of every piecewise op (ReLU, max, clamp) run inside the block.

    Two evaluations with equal patterns lie on the same smooth piece, which
    is what finite-difference oracles need.
    """
    global _branch_log
    old = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = old


def _note_branch(pattern: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(pattern)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and an optional stream path.

    Philox output depends only on the key and counter, so the stream is
    identical across runs and platforms.  The stream length is part of the
    key because the seed sequence alone treats trailing zeros as absent.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, len(stream), *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


class Node:
    __slots__ = ("index", "op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.index = next(_node_counter)
        self.op = op
        self.parents = parents
        self.backward = backward

    def __repr__(self):
        return f"Node({self.op}#{self.index})"


class Tensor:
    """N-dimensional array with an optional gradient and graph handle."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node(self) -> Node | None:
        return self._node

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f", node={self._node}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate: a leaf used twice receives the sum of both
    contributions, and repeated calls add onto existing ``.grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    reachable: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or node.index in seen:
            continue
        seen.add(node.index)
        reachable.append(t)
        stack.extend(node.parents)
    reachable.sort(key=lambda t: t._node.index, reverse=True)

    pending: dict[int, np.ndarray] = {id(loss): seed}
    for t in reachable:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = np.array(pg, dtype=parent.data.dtype) if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    _note_branch(mask)
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a, eps: float = 0.0) -> Tensor:
    """Natural log of ``max(a, eps)``; gradient is zero where clamping applied."""
    a = as_tensor(a)
    if eps > 0:
        keep = a.data > eps
        _note_branch(keep)
        x = np.where(keep, a.data, eps).astype(a.dtype)
        return _make(np.log(x), (a,), lambda g: (g * keep / x,), "log")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


_UNARY = {"neg": neg, "relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``relu``, ...)."""
    if op_kind in _BINARY:
        if b is None:
            raise ContractError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ContractError(f"{op_kind} takes one operand")
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast as in :func:`numpy.matmul`."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


# -- reductions and shape ops -------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op_kind: str, a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (all axes when ``None``)."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    if op_kind == "sum":
        out = a.data.sum(axis=axes, keepdims=keepdims)
        return _make(out, (a,), lambda g: (np.broadcast_to(g.reshape(kept_shape), a.shape).copy(),), "sum")
    if op_kind == "mean":
        count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        out = a.data.sum(axis=axes, keepdims=keepdims) / count
        out = np.asarray(out, dtype=a.dtype)
        return _make(out, (a,),
                     lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, a.shape).astype(a.dtype),), "mean")
    if op_kind == "max":
        rest = [i for i in range(a.ndim) if i not in axes]
        moved = np.transpose(a.data, rest + list(axes))
        flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
        arg = flat.argmax(axis=-1)
        _note_branch(arg)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        out = out.reshape(kept_shape) if keepdims else out

        def bw(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, arg[..., None], g.reshape(arg.shape)[..., None], axis=-1)
            gmoved = gflat.reshape(moved.shape)
            return (np.transpose(gmoved, np.argsort(rest + list(axes))),)

        return _make(np.asarray(out), (a,), bw, "max")
    raise ValueError(f"unknown reduction {op_kind!r}")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), bw, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; all other extents must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ndim = tensors[0].ndim
    (ax,) = _norm_axes(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise ShapeError(f"concat extents disagree off axis {ax}: {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in tensors], axis=axis)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    (ax,) = _norm_axes(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    (ax,) = _norm_axes(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=ax, keepdims=True),), "log_softmax")


def dropout(a, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: scales kept units by ``1/(1-p)`` in training, identity otherwise."""
    a = as_tensor(a)
    if not train or p <= 0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1 - p)
    return mul(a, Tensor(keep, dtype=a.dtype))
