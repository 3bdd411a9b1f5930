"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation goes through :func:`apply_op`, which records a
node on the thread's active :class:`Tape` whenever one of its inputs requires a
gradient.  :func:`backward` walks that tape in exact reverse order.

Training runs in float32; switch to float64 with :func:`precision` for
gradient checks.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

_local = threading.local()

_DTYPES = {"float32": np.float32, "float64": np.float64}


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class GradientError(RuntimeError):
    """Backward pass misuse (non-scalar loss, detached loss, reused tape)."""


class NondeterministicError(RuntimeError):
    """A function under gradient check returned different values for the same input."""


def get_dtype() -> type:
    return getattr(_local, "dtype", np.float32)


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _local.dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str):
    previous = get_dtype()
    set_precision(name)
    try:
        yield
    finally:
        _local.dtype = previous


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Node:
    __slots__ = ("out", "inputs", "backward", "name")

    def __init__(self, out, inputs, backward, name):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.name = name


class Tape:
    """Ordered record of executed ops; inputs of a node always precede it."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Node) -> None:
        if self.consumed:
            raise GradientError("tape already consumed by backward(); call reset_tape() first")
        self.nodes.append(node)


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = _local.tape = Tape()
    return tape


def reset_tape() -> Tape:
    _local.tape = Tape()
    return _local.tape


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._node = None
        t._tape = None
        return t

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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return elementwise("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", _as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", _as_tensor(other, self.dtype), self)

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def tanh(self):
        return elementwise("tanh", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def relu(self):
        return elementwise("relu", self)

    def sqrt(self):
        return elementwise("sqrt", self)

    def square(self):
        return elementwise("square", self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype or get_dtype()))


def apply_op(
    name: str,
    out: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap ``out`` as a tensor and register its gradient rule.

    ``backward_fn`` receives the gradient w.r.t. ``out`` and returns one
    gradient (or ``None``) per input, in input order.
    """
    result = Tensor._wrap(out)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape = current_tape()
        node = Node(result, tuple(inputs), backward_fn, name)
        tape.record(node)
        result._node = node
        result._tape = tape
    return result


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_UNARY = {
    "neg": (np.negative, lambda x, y, g: -g),
    "exp": (np.exp, lambda x, y, g: g * y),
    "log": (np.log, lambda x, y, g: g / x),
    "tanh": (np.tanh, lambda x, y, g: g * (1 - y * y)),
    "sigmoid": (_sigmoid, lambda x, y, g: g * y * (1 - y)),
    "relu": (lambda x: np.maximum(x, 0), lambda x, y, g: g * (x > 0)),
    "sqrt": (np.sqrt, lambda x, y, g: g / (2 * y)),
    "square": (np.square, lambda x, y, g: 2 * g * x),
}

_BINARY = {
    "add": (np.add, lambda a, b, g: (g, g)),
    "sub": (np.subtract, lambda a, b, g: (g, -g)),
    "mul": (np.multiply, lambda a, b, g: (g * b, g * a)),
    "div": (np.divide, lambda a, b, g: (g / b, -g * a / (b * b))),
    "maximum": (np.maximum, lambda a, b, g: (g * (a >= b), g * (a < b))),
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Apply a unary or broadcasting binary elementwise op."""
    if op_kind in _UNARY:
        if b is not None:
            raise TypeError(f"{op_kind} is unary")
        a = _as_tensor(a)
        fwd, bwd = _UNARY[op_kind]
        x = a.data
        y = fwd(x)
        return apply_op(op_kind, y, (a,), lambda g: (bwd(x, y, g),))
    if op_kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = _as_tensor(b, a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype)
    else:
        a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op_kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None
    fwd, bwd = _BINARY[op_kind]
    xa, xb = a.data, b.data
    out = fwd(xa, xb)

    def backward_fn(g):
        ga, gb = bwd(xa, xb, g)
        return unbroadcast(ga, xa.shape), unbroadcast(gb, xb.shape)

    return apply_op(op_kind, out, (a, b), backward_fn)


def maximum(a, b) -> Tensor:
    return elementwise("maximum", a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    xa, xb = a.data, b.data
    return apply_op("matmul", xa @ xb, (a, b), lambda g: (g @ xb.T, xa.T @ g))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op("sum", np.asarray(out), (a,), backward_fn)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return apply_op("mean", np.asarray(out), (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return apply_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return apply_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    return apply_op("broadcast_to", out, (a,), lambda g: (unbroadcast(g, old),))


def take(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    shape, dtype = a.shape, a.dtype
    out = np.array(a.data[index])

    def backward_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return apply_op("take", out, (a,), backward_fn)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            i != ax and p.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(
                f"concat along axis {axis}: shapes {ref} and {p.shape} differ off-axis"
            )
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return apply_op("concat", out, parts, lambda g: tuple(np.split(g, bounds, axis=ax)))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate feature maps along the channel axis (axis 1)."""
    return concat(parts, axis=1)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    out, start = [], 0
    for n in sizes:
        out.append(take(x, (slice(None), slice(start, start + n))))
        start += n
    if start != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires one and feeds ``loss``."""
    if loss.size != 1:
        raise GradientError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise GradientError("loss is detached from any tape (no input requires grad)")
    tape = loss._tape
    if tape.consumed:
        raise GradientError("backward() already ran on this tape; call reset_tape() and recompute")
    grads = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}
    nodes, tape.nodes = tape.nodes, []
    tape.consumed = True
    while nodes:
        # drop each node once visited so saved activations are freed early
        node = nodes.pop()
        if node.out is not loss:
            node.out._node = None
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = inp
    for key, g in grads.items():
        t = tensors[key]
        g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               max_coords: Optional[int] = None, seed: int = 0,
               reference_dtype=None) -> float:
    """Max relative error between backprop and central finite differences.

    Error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.  With
    ``max_coords`` only a random subset of coordinates per input is probed.

    ``reference_dtype`` (e.g. ``np.longdouble``) evaluates the finite
    differences on inputs cast to a wider type, so that rounding in the
    forward pass does not swamp very small gradients.  The analytic side
    always runs in the working precision.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    reset_tape()
    loss = fn(*inputs)
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def value() -> float:
        with no_grad():
            return np.asarray(fn(*inputs).data).reshape(-1)[0]

    if value() != value():
        raise NondeterministicError("fn returned different values for identical inputs")
    originals = [t.data for t in inputs]
    if reference_dtype is not None:
        for t in inputs:
            t.data = t.data.astype(reference_dtype)
    try:
        return _max_fd_error(inputs, analytic, value, eps, max_coords, seed)
    finally:
        for t, d in zip(inputs, originals):
            t.data = d
        reset_tape()


def _max_fd_error(inputs, analytic, value, eps, max_coords, seed) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        af = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = float((fp - fm) / (2 * eps))
            ana = float(af[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
