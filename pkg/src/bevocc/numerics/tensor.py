"""Dense tensor with tape-style reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a closure that pushes the output gradient back to them.
``Tensor.backward`` replays the recorded graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from collections import defaultdict

import numpy as np

_DEFAULT_DTYPE = np.float64
_CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite value produced by '{op}' ({where})")
        self.op = op


class ShapeError(ValueError):
    pass


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = old


# ---------------------------------------------------------------- MAC counting

class MacCounter:
    """Accumulates multiply-add counts of matmul kernels per label."""

    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)
        self._labels: list[str] = ["other"]

    @property
    def label(self) -> str:
        return self._labels[-1]

    def add(self, n: int) -> None:
        self.counts[self.label] += int(n)

    def total(self) -> int:
        return sum(self.counts.values())


_COUNTERS: list[MacCounter] = []


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


@contextlib.contextmanager
def mac_label(label: str):
    for c in _COUNTERS:
        c._labels.append(label)
    try:
        yield
    finally:
        for c in _COUNTERS:
            c._labels.pop()


def record_macs(n: int) -> None:
    for c in _COUNTERS:
        c.add(n)


# ---------------------------------------------------------------------- Tensor

class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- basic properties
    @property
    def shape(self) -> tuple:
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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- graph
    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None) -> None:
        """Reverse-mode sweep from this tensor.

        Leaf gradients accumulate across calls; interior gradients are released
        as soon as they have been propagated.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            if _CHECK_FINITE:
                for p in node._parents:
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise NonFiniteError(node.op, "backward")
            if not node.is_leaf:
                node.grad = None

    # -- operator sugar, bound to ops below
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        return ops.matmul(other, self)

    def __getitem__(self, idx):
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return ops.transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis=axis, keepdims=keepdims)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None and arr.dtype.kind != "f":
        dtype = _DEFAULT_DTYPE
    return Tensor(arr, dtype=dtype)


def make_result(data: np.ndarray, parents, backward, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording ``backward`` if any parent needs grad."""
    if _CHECK_FINITE and data.dtype.kind == "f" and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


from . import ops  # noqa: E402  (operator sugar above resolves at call time)
