"""Dense n-d arrays with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded when at least one input requires a gradient. ``tape.backward``
replays the record in reverse and assigns ``.grad`` on every reachable leaf.

Training runs in 32-bit floats; gradient checks switch the default to 64-bit
with :func:`precision`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "ContractError",
    "Tensor",
    "Tape",
    "no_grad",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "as_tensor",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "transpose",
    "reshape",
    "getitem",
    "take_rows",
    "concat",
    "concat_seq",
    "sum",
    "mean",
    "softmax_rows",
    "layer_norm",
    "rms_norm",
    "silu",
    "gelu",
    "sigmoid",
    "log_sigmoid",
    "mse",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


_DEFAULT_DTYPE = [np.dtype(np.float32)]
_local = threading.local()


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE[0] = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on the current thread."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_leaf", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape = None
        self._leaf = True
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._tape = None
        t._leaf = True
        t.name = None
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(self.data.astype(dtype), self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


class Tape:
    """Ordered record of differentiable operations.

    A tape is confined to the thread that entered it. Records are appended in
    execution order, which is a topological order of the computation, so the
    reverse replay in :meth:`backward` visits each operation after all of its
    consumers.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape scopes exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        out._tape = self
        out._leaf = False
        self.nodes.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._leaf:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.grad = grads[key].astype(leaf.dtype, copy=False)


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the tape it was recorded on."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss is not attached to a tape")
    loss._tape.backward(loss)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=get_default_dtype()))


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype))


def _result(arr: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor._wrap(arr)
    out = Tensor._wrap(arr, requires_grad=True)
    tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _operand(b, a)
    b = as_tensor(b)
    return _operand(a, b), b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None,
            _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None,
        )

    return _result(ad @ bd, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [
            g @ wd if x.requires_grad else None,
            g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return grads

    return _result(out, inputs, vjp)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 dims, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(int(x) % a.ndim for x in axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {original} to {tuple(shape)}") from exc
    return _result(out, (a,), lambda g: (g.reshape(original),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    """Slicing. Basic slices route gradients by assignment, fancy indices by scatter-add."""
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=True) if not basic else out, (a,), vjp)


def take_rows(table: Tensor, indices) -> Tensor:
    """Gather rows of a 2-d table; ``indices`` may have any integer shape."""
    indices = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-d table, got {table.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ContractError(f"row index out of range for table of {table.shape[0]} rows")

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[indices], (table,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat needs at least one part")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: {ref} incompatible with {p.shape}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), vjp)


def concat_seq(parts: Sequence[Tensor]) -> Tensor:
    """Order-preserving concatenation along the sequence axis (second to last)."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat_seq needs at least one part")
    d = parts[0].shape[-1]
    for p in parts:
        if p.ndim < 2:
            raise ShapeError(f"concat_seq parts must be at least 2-d, got {p.shape}")
        if p.shape[-1] != d:
            raise ShapeError(f"concat_seq feature mismatch: {parts[0].shape} vs {p.shape}")
    return concat(parts, axis=-2)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax_rows needs a nonempty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), vjp)


def layer_norm(x: Tensor, scale: Optional[Tensor] = None, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then multiply by ``scale``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]
    sd = None if scale is None else scale.data

    def vjp(g):
        gs = None
        if scale is not None:
            gs = _unbroadcast(g * xhat, sd.shape) if scale.requires_grad else None
            g = g * sd
        gx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True) / n)
        return (gx, gs) if scale is not None else (gx,)

    if scale is None:
        return _result(xhat, (x,), vjp)
    return _result(xhat * sd, (x, scale), vjp)


def rms_norm(x: Tensor, scale: Optional[Tensor] = None, eps: float = 1e-6) -> Tensor:
    """Divide the last axis by its root mean square, then multiply by ``scale``."""
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    n = x.shape[-1]
    sd = None if scale is None else scale.data

    def vjp(g):
        gs = None
        if scale is not None:
            gs = _unbroadcast(g * xhat, sd.shape) if scale.requires_grad else None
            g = g * sd
        gx = inv * (g - xhat * (g * xhat).sum(axis=-1, keepdims=True) / n)
        return (gx, gs) if scale is not None else (gx,)

    if scale is None:
        return _result(xhat, (x,), vjp)
    return _result(xhat * sd, (x, scale), vjp)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x: Tensor) -> Tensor:
    v = x.data
    out = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    return _result(out, (x,), lambda g: (g * _sigmoid(-v),))


def silu(x: Tensor) -> Tensor:
    v = x.data
    s = _sigmoid(v)
    return _result(v * s, (x,), lambda g: (g * (s + v * s * (1.0 - s)),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    inner = _GELU_C * (v + 0.044715 * v2 * v)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)

    return _result(out.astype(v.dtype, copy=False), (x,), vjp)


def mse(pred: Tensor, target, axis=None) -> Tensor:
    """Mean squared error, over everything or over ``axis``."""
    pred = as_tensor(pred)
    target = _operand(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    count = diff.size if axis is None else int(np.prod([diff.shape[i] for i in np.atleast_1d(axis)]))
    out = np.asarray((diff * diff).sum(axis=axis) / count)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        gp = (2.0 / count) * g * diff
        return (gp if pred.requires_grad else None, -gp if target.requires_grad else None)

    return _result(out.astype(diff.dtype, copy=False), (pred, target), vjp)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4, indices=None) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``f`` must return a scalar tensor and may close over ``x``; its data is
    perturbed in place one coordinate at a time. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. ``indices``
    restricts the comparison to a subset of flat positions.
    """
    if x.dtype != np.float64:
        raise ContractError("grad_check runs in 64-bit mode; build inputs under precision(np.float64)")
    if not 1e-6 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            y = f(x)
        if y.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {y.shape}")
        tape.backward(y)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        flat = x.data.reshape(-1)
        positions = range(flat.size) if indices is None else indices
        worst = 0.0
        with no_grad():
            for i in positions:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(x).item()
                flat[i] = orig - eps
                fm = f(x).item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
        return float(worst)
    finally:
        x.requires_grad = was
        x.grad = None
