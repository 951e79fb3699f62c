"""Dense tensors with tape-free reverse-mode differentiation.

Every backward rule is written with the same differentiable operations the
forward pass uses, so a backward pass run with ``create_graph=True`` produces
gradients that can themselves be differentiated (needed for the R1 penalty).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "as_tensor",
    "backward",
    "grad",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending axis."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_local = threading.local()
_default_dtype = [np.float64]


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _local.grad_enabled = enabled
    try:
        yield
    finally:
        _local.grad_enabled = prev


def no_grad():
    """Context manager that disables graph recording on this thread."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


def get_default_dtype():
    return _default_dtype[0]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype[0] = dtype.type


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype[0]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype[0] = prev


class Tensor:
    """A float array plus the bookkeeping needed for reverse-mode gradients.

    Attributes:
        data: the underlying ``numpy.ndarray`` (float32 or float64).
        requires_grad: whether gradients flow to/through this tensor.
        grad: accumulated gradient array for leaves after :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: Op | None = None
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, p):
        return Pow.apply(self, p=float(p))

    def __getitem__(self, index):
        return Slice.apply(self, index=_normalize_index(index, self.ndim))

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=_axes(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        axes = _axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return Sum.apply(self, axis=axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(axes))

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def broadcast_to(self, shape):
        return BroadcastTo.apply(self, shape=tuple(shape))

    def square(self):
        return Mul.apply(self, self)

    def sqrt(self):
        return Sqrt.apply(self)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sin(self):
        return Sin.apply(self)

    def cos(self):
        return Cos.apply(self)

    def backward(self, create_graph: bool = False) -> None:
        backward(self, create_graph=create_graph)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or get_default_dtype()))


def _axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _normalize_index(index, ndim):
    if not isinstance(index, tuple):
        index = (index,)
    for item in index:
        if not (isinstance(item, slice) or item is Ellipsis):
            raise TypeError("only basic slicing is differentiable")
    return index


# ---------------------------------------------------------------------------
# Op machinery
# ---------------------------------------------------------------------------

_check_finite = [True]


def set_finite_checks(enabled: bool) -> None:
    _check_finite[0] = bool(enabled)


class Op:
    """A differentiable operation.

    Subclasses implement ``forward`` on raw arrays and ``backward`` on
    Tensors; ``needs`` flags which inputs actually require a gradient.
    """

    inputs: tuple[Tensor, ...] = ()

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, g: Tensor, needs: Sequence[bool]):
        raise NotImplementedError

    @classmethod
    def apply(cls, *args, **params) -> Tensor:
        like = next((a for a in args if isinstance(a, Tensor)), None)
        tensors = tuple(as_tensor(a, like) for a in args)
        op = cls()
        op.__dict__.update(params)
        out = Tensor(op.forward(*(t.data for t in tensors)))
        if _check_finite[0] and not np.isfinite(out.data).all():
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            op.inputs = tensors
            out.requires_grad = True
            out._op = op
        return out


def _topo_order(root: Tensor) -> list[Tensor]:
    """Inputs-before-outputs ordering of all grad-requiring nodes under root."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._op is not None:
            for inp in node._op.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def _propagate(root: Tensor, targets: Iterable[Tensor] | None, create_graph: bool, seed=None):
    if not root.requires_grad:
        raise ValueError("tensor does not require grad")
    order = _topo_order(root)
    target_ids = None if targets is None else {id(t) for t in targets}
    needed: dict[int, bool] = {}
    for node in order:
        if node._op is None:
            needed[id(node)] = target_ids is None or id(node) in target_ids
        else:
            needed[id(node)] = any(needed.get(id(i), False) for i in node._op.inputs)
    if seed is None:
        seed = Tensor(np.ones_like(root.data))
    grads: dict[int, Tensor] = {id(root): seed}
    leaves: dict[int, tuple[Tensor, Tensor]] = {}
    mode = contextlib.nullcontext() if create_graph else no_grad()
    with mode:
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or not needed[id(node)]:
                continue
            if node._op is None:
                leaves[id(node)] = (node, g)
                continue
            op = node._op
            needs = [inp.requires_grad and needed.get(id(inp), False) for inp in op.inputs]
            in_grads = op.backward(g, needs)
            for inp, ig, need in zip(op.inputs, in_grads, needs):
                if not need or ig is None:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(
                        f"{type(op).__name__} backward produced grad {ig.shape} for input {inp.shape}"
                    )
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
    return leaves


def backward(loss: Tensor, inputs: Sequence[Tensor] | None = None, create_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``inputs`` restricts accumulation (and the work done) to the given leaves.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    leaves = _propagate(loss, inputs, create_graph)
    for leaf, g in leaves.values():
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False,
         grad_output: Tensor | None = None) -> list[Tensor]:
    """Return d(output)/d(input) for each input without touching ``.grad``."""
    if grad_output is None and output.size != 1:
        raise ShapeError(f"grad of non-scalar output {output.shape} needs grad_output")
    for t in inputs:
        if not t.is_leaf:
            raise ValueError("grad() inputs must be leaf tensors")
    leaves = _propagate(output, inputs, create_graph, seed=grad_output)
    out = []
    for t in inputs:
        hit = leaves.get(id(t))
        out.append(hit[1] if hit is not None else Tensor(np.zeros_like(t.data)))
    return out


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == tuple(shape):
        return g
    return SumTo.apply(g, shape=tuple(shape))


class Add(Op):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g, needs):
        return (sum_to(g, self.shapes[0]) if needs[0] else None,
                sum_to(g, self.shapes[1]) if needs[1] else None)


class Sub(Op):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g, needs):
        return (sum_to(g, self.shapes[0]) if needs[0] else None,
                sum_to(-g, self.shapes[1]) if needs[1] else None)


class Mul(Op):
    def forward(self, a, b):
        return a * b

    def backward(self, g, needs):
        a, b = self.inputs
        return (sum_to(g * b, a.shape) if needs[0] else None,
                sum_to(g * a, b.shape) if needs[1] else None)


class Div(Op):
    def forward(self, a, b):
        return a / b

    def backward(self, g, needs):
        a, b = self.inputs
        ga = sum_to(g / b, a.shape) if needs[0] else None
        gb = sum_to(-g * a / (b * b), b.shape) if needs[1] else None
        return ga, gb


class Neg(Op):
    def forward(self, a):
        return -a

    def backward(self, g, needs):
        return (-g,)


class Pow(Op):
    p: float

    def forward(self, a):
        return a ** self.p

    def backward(self, g, needs):
        (a,) = self.inputs
        if self.p == 2.0:
            return (g * a * 2.0,)
        return (g * self.p * a ** (self.p - 1.0),)


class Sqrt(Op):
    def forward(self, a):
        return np.sqrt(a)

    def backward(self, g, needs):
        (a,) = self.inputs
        return (g / (Sqrt.apply(a) * 2.0),)


class Exp(Op):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g, needs):
        (a,) = self.inputs
        return (g * Exp.apply(a),)


class Log(Op):
    def forward(self, a):
        return np.log(a)

    def backward(self, g, needs):
        (a,) = self.inputs
        return (g / a,)


class Sin(Op):
    def forward(self, a):
        return np.sin(a)

    def backward(self, g, needs):
        (a,) = self.inputs
        return (g * Cos.apply(a),)


class Cos(Op):
    def forward(self, a):
        return np.cos(a)

    def backward(self, g, needs):
        (a,) = self.inputs
        return (-g * Sin.apply(a),)


class Sigmoid(Op):
    def forward(self, a):
        # split by sign for a stable logistic
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    def backward(self, g, needs):
        (a,) = self.inputs
        s = Sigmoid.apply(a)
        return (g * s * (1.0 - s),)


class Softplus(Op):
    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, g, needs):
        (a,) = self.inputs
        return (g * Sigmoid.apply(a),)


class LeakyReLU(Op):
    slope: float

    def forward(self, a):
        # max(a, slope*a) is leaky relu for 0 < slope < 1
        return np.maximum(a, a * a.dtype.type(self.slope))

    def backward(self, g, needs):
        (a,) = self.inputs
        dt = g.dtype.type
        mask = np.where(a.data < 0, dt(self.slope), dt(1.0))
        return (g * Tensor(mask),)


class Sum(Op):
    axis: tuple[int, ...]
    keepdims: bool

    def forward(self, a):
        self.in_shape = a.shape
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g, needs):
        kept = list(self.in_shape)
        for ax in self.axis:
            kept[ax] = 1
        return (g.reshape(kept).broadcast_to(self.in_shape),)


class SumTo(Op):
    shape: tuple[int, ...]

    def forward(self, a):
        self.in_shape = a.shape
        lead = a.ndim - len(self.shape)
        axes = tuple(range(lead)) + tuple(
            i + lead for i, n in enumerate(self.shape) if n == 1 and a.shape[i + lead] != 1
        )
        out = np.sum(a, axis=axes, keepdims=True) if axes else a
        return out.reshape(self.shape)

    def backward(self, g, needs):
        return (g.broadcast_to(self.in_shape),)


class BroadcastTo(Op):
    shape: tuple[int, ...]

    def forward(self, a):
        self.in_shape = a.shape
        return np.array(np.broadcast_to(a, self.shape))

    def backward(self, g, needs):
        return (sum_to(g, self.in_shape),)


class Reshape(Op):
    shape: tuple[int, ...]

    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(self.shape)

    def backward(self, g, needs):
        return (g.reshape(self.in_shape),)


class Transpose(Op):
    axes: tuple[int, ...]

    def forward(self, a):
        return np.ascontiguousarray(a.transpose(self.axes))

    def backward(self, g, needs):
        return (g.transpose(tuple(np.argsort(self.axes))),)


class Slice(Op):
    index: tuple

    def forward(self, a):
        self.in_shape = a.shape
        return np.ascontiguousarray(a[self.index])

    def backward(self, g, needs):
        return (PadInto.apply(g, index=self.index, shape=self.in_shape),)


class PadInto(Op):
    """Scatter ``a`` into a zero array of ``shape`` at a basic-slice index."""

    index: tuple
    shape: tuple[int, ...]

    def forward(self, a):
        out = np.zeros(self.shape, dtype=a.dtype)
        out[self.index] = a
        return out

    def backward(self, g, needs):
        return (Slice.apply(g, index=self.index),)


class Concat(Op):
    axis: int

    def forward(self, *arrays):
        self.sizes = [a.shape[self.axis] for a in arrays]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g, needs):
        out, start = [], 0
        for size, need in zip(self.sizes, needs):
            idx = [slice(None)] * g.ndim
            idx[self.axis] = slice(start, start + size)
            out.append(g[tuple(idx)] if need else None)
            start += size
        return tuple(out)


class MatMul(Op):
    """Plain 2-D matrix product."""

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner axis mismatch: {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, g, needs):
        a, b = self.inputs
        return (MatMul.apply(g, b.transpose()) if needs[0] else None,
                MatMul.apply(a.transpose(), g) if needs[1] else None)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ndim = tensors[0].ndim
    return Concat.apply(*tensors, axis=axis % ndim)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def softplus(x) -> Tensor:
    return Softplus.apply(x)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


def leaky_relu_raw(x, slope: float) -> Tensor:
    return LeakyReLU.apply(x, slope=float(slope))


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-4,
                      seed: int = 0, wrt: Sequence[int] | None = None, floor: float | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors to a Tensor; a fixed random projection reduces the
    output to a scalar.  Error per element is
    ``|a - n| / max(|a|, |n|, floor)`` with ``floor`` defaulting to ``eps``.
    Runs in float64.
    """
    floor = eps if floor is None else floor
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    with default_dtype(np.float64), enable_grad():
        # evaluations keep grad mode on so fn may itself differentiate (double backward)
        probe = fn(*[Tensor(a, requires_grad=True) for a in arrays])
        proj = np.random.default_rng(seed).standard_normal(probe.shape)

        def scalar(arrs):
            out = fn(*[Tensor(a, requires_grad=True) for a in arrs])
            return float(np.sum(out.data * proj))

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*leaves)
        loss = (out * Tensor(proj)).sum()
        analytic = {}
        if loss.requires_grad:
            targets = [leaves[i] for i in wrt]
            for t, g in zip(targets, grad(loss, targets)):
                analytic[id(t)] = g.data
        worst = 0.0
        for i in wrt:
            a_grad = analytic.get(id(leaves[i]), np.zeros_like(arrays[i]))
            base = arrays[i]
            flat = base.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                up = scalar(arrays)
                flat[j] = orig - eps
                down = scalar(arrays)
                flat[j] = orig
                num = (up - down) / (2 * eps)
                ana = a_grad.reshape(-1)[j]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst
