"""
Dense tensors with reverse-mode automatic differentiation.

Storage is a row-major numpy array (float32 or float64, see Precision). Every
operation records its parents and a closure that maps the output gradient to
one gradient per parent; `Tensor.backward` walks the recorded DAG once in
reverse topological order.

Broadcasting follows numpy rules for the leading dimensions only (a bias of
shape [d] onto [n, d], a learned scalar onto a matrix); gradients are summed
back to the operand shape.

The checkpoint container at the bottom of this module is the on-disk format
for named parameter arrays.
"""

from __future__ import annotations

import contextlib
import logging
import math
import os
import struct
import threading
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import Precision
from .errors import CheckpointError, ContractError, DimensionError, IndexRangeError

logger = logging.getLogger(__name__)

__all__ = [
    "Precision", "Tensor", "Parameter", "no_grad", "is_grad_enabled", "as_tensor", "from_op",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "relu", "exp", "abs_", "square",
    "shifted_softplus", "sum_", "mean", "reshape", "concat", "rows", "cols", "take_rows",
    "scatter_sum", "layer_norm", "softmax_rowwise", "bce_with_logits",
    "glorot_uniform", "zeros", "ones", "save_arrays", "load_arrays",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Thread-local: operations inside build no graph."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class IndexedGrad:
    """Gradient contribution that touches only part of the parent (slices, gathers)."""

    __slots__ = ("index", "value")

    def __init__(self, index, value: np.ndarray):
        self.index = index
        self.value = value

    def add_into(self, target: np.ndarray) -> None:
        if isinstance(self.index, (slice, tuple)):
            target[self.index] += self.value
        else:
            np.add.at(target, self.index, self.value)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, precision: Optional[Precision] = None,
                 name: Optional[str] = None):
        arr = np.asarray(data)
        if precision is not None:
            arr = arr.astype(Precision(precision).dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> Precision:
        return Precision.of(self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, precision={self.precision.value}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff ----------------------------------------------------------
    def _accumulate(self, g) -> None:
        if isinstance(g, IndexedGrad):
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            g.add_into(self.grad)
            return
        g = _unbroadcast(np.asarray(g), self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = self._topological_order()
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators -----------------------------------------------------------
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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis=axis)

    def relu(self) -> "Tensor":
        return relu(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A learned leaf tensor; always requires grad."""

    __slots__ = ()

    def __init__(self, data, precision: Optional[Precision] = None, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, precision=precision, name=name)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: TensorLike, like: Optional[Tensor] = None, precision: Optional[Precision] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x, precision=precision)


def from_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap the result of a primitive. `backward(g)` returns one gradient per parent."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    parents = tuple(parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _pair(a: TensorLike, b: TensorLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise ContractError(f"mixed precision operands: {a.dtype} and {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    raise ContractError("at least one operand must be a Tensor")


# -- elementwise ---------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    return from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    return from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    return from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    return from_op(a.data / b.data, (a, b),
                   lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def neg(a: Tensor) -> Tensor:
    return from_op(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return from_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return from_op(out, (a,), lambda g: (g * out,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return from_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    return from_op(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


_LOG2 = math.log(2.0)


def shifted_softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x) - ln 2: zero at the origin, smooth everywhere."""
    out = (np.logaddexp(0, a.data) - _LOG2).astype(a.dtype)
    sig = (1.0 / (1.0 + np.exp(-a.data))).astype(a.dtype)
    return from_op(out, (a,), lambda g: (g * sig,))


# -- reductions and shape ------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return from_op(out, (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return from_op(a.data.T, (a,), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return from_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat of an empty list")
    dtypes = {p.dtype for p in parts}
    if len(dtypes) != 1:
        raise ContractError(f"mixed precision operands: {sorted(map(str, dtypes))}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        out = []
        for i in range(len(parts)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(g[tuple(index)])
        return out

    return from_op(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    index = slice(start, stop)
    return from_op(a.data[index], (a,), lambda g: (IndexedGrad(index, g),))


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    index = (slice(None), slice(start, stop))
    return from_op(a.data[index], (a,), lambda g: (IndexedGrad(index, g),))


def take_rows(a: Tensor, index: Union[Sequence[int], np.ndarray]) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        bad = int(np.flatnonzero((idx < 0) | (idx >= a.shape[0]))[0])
        raise IndexRangeError(f"row index {int(idx[bad])} at position {bad} out of range for {a.shape[0]} rows")
    return from_op(a.data[idx], (a,), lambda g: (IndexedGrad(idx, g),))


def scatter_sum(values: Tensor, index: Union[Sequence[int], np.ndarray], out_size: int) -> Tensor:
    """out[i] = sum of values[e] over e with index[e] == i; empty rows stay zero."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape[0] != values.shape[0]:
        raise DimensionError(f"scatter_sum: {idx.shape[0]} indices for {values.shape[0]} rows")
    bad = np.flatnonzero((idx < 0) | (idx >= out_size))
    if bad.size:
        pos = int(bad[0])
        raise IndexRangeError(f"scatter_sum index {int(idx[pos])} at position {pos} >= out_size {out_size}")
    out = np.zeros((out_size,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, idx, values.data)
    return from_op(out, (values,), lambda g: (g[idx],))


# -- fused primitives -----------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: input width {d} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def softmax_rowwise(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty row")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return from_op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype).reshape(z.shape)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    sig = 1.0 / (1.0 + np.exp(-z))
    return from_op(np.asarray(loss.mean(), dtype=z.dtype), (logits,), lambda g: (g * (sig - y) / n,))


# -- initialisers -----------------------------------------------------------------------

def glorot_uniform(shape: Tuple[int, ...], rng: np.random.Generator, precision: Precision) -> np.ndarray:
    fan_in, fan_out = (1, shape[0]) if len(shape) == 1 else (shape[0], shape[1])
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(Precision(precision).dtype)


def zeros(shape: Tuple[int, ...], precision: Precision) -> np.ndarray:
    return np.zeros(shape, dtype=Precision(precision).dtype)


def ones(shape: Tuple[int, ...], precision: Precision) -> np.ndarray:
    return np.ones(shape, dtype=Precision(precision).dtype)


# -- checkpoint container ---------------------------------------------------------------
#
# header: 8-byte magic, u16 version, u16 bytes-per-scalar, u32 entry count (16 bytes)
# entry:  u32 name length, UTF-8 name, u64 element count, little-endian scalars

CHECKPOINT_MAGIC = b"MOLMIXCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sHHI")


def save_arrays(path: Union[str, Path], arrays: Dict[str, np.ndarray], precision: Precision) -> None:
    precision = Precision(precision)
    scalar = "<f4" if precision is Precision.F32 else "<f8"
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, np.dtype(scalar).itemsize, len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            flat = np.ascontiguousarray(arr, dtype=scalar).reshape(-1)
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", flat.size))
            fh.write(flat.tobytes())
    os.replace(tmp, path)
    logger.debug("Wrote %d arrays to %s", len(arrays), path)


def load_arrays(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Precision]:
    """Returns flat arrays by name; callers reshape against their own parameter shapes."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, itemsize, count = _HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a molmix checkpoint (magic={magic!r}, version={version})")
    if itemsize not in (4, 8):
        raise CheckpointError(f"{path}: unsupported scalar width {itemsize}")
    scalar = "<f4" if itemsize == 4 else "<f8"
    offset = _HEADER.size
    arrays: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (n,) = struct.unpack_from("<Q", blob, offset)
            offset += 8
            nbytes = n * itemsize
            if offset + nbytes > len(blob):
                raise CheckpointError(f"{path}: entry {name!r} runs past end of file")
            arrays[name] = np.frombuffer(blob, dtype=scalar, count=n, offset=offset).astype(scalar[1:])
            offset += nbytes
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated entry table") from e
    return arrays, Precision.F32 if itemsize == 4 else Precision.F64
