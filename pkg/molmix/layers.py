"""
Parameter containers on top of molmix.tensor.

Module walks its attributes (in assignment order) to find Parameters, child
Modules and lists of either, which gives every parameter a stable dotted name
such as `fusion.blocks.3.attn.wq.weight`. Those names key the checkpoint file.
"""

from __future__ import annotations

import logging
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .config import Precision
from .errors import CheckpointError, IndexRangeError
from .tensor import Parameter, Tensor, glorot_uniform, layer_norm, ones, relu, take_rows, zeros

logger = logging.getLogger(__name__)


class Module:
    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        out: List[Tuple[str, Parameter]] = []
        for attr, value in vars(self).items():
            _collect(f"{prefix}{attr}", value, out)
        return out

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray], skip: Sequence[str] = ()) -> None:
        """Copy arrays into parameters by name. Flat arrays are reshaped to the
        parameter's shape; a size mismatch means a different architecture."""
        params = dict(self.named_parameters())
        missing = [n for n in params if n not in arrays and not _skipped(n, skip)]
        if missing:
            raise CheckpointError(f"checkpoint lacks {len(missing)} parameters, first: {missing[0]}")
        for name, p in params.items():
            if _skipped(name, skip):
                continue
            arr = np.asarray(arrays[name])
            if arr.size != p.data.size:
                raise CheckpointError(
                    f"architecture mismatch at {name}: checkpoint has {arr.size} elements, model expects {p.shape}")
            p.data = arr.reshape(p.shape).astype(p.dtype, copy=True)
        skipped = sum(_skipped(n, skip) for n in params)
        logger.debug("Loaded %d parameter arrays (%d skipped)", len(params) - skipped, skipped)


def _skipped(name: str, prefixes: Sequence[str]) -> bool:
    return any(name == s or name.startswith(s + ".") for s in prefixes)


def _collect(name: str, value, out: List[Tuple[str, Parameter]]) -> None:
    if isinstance(value, Parameter):
        value.name = name
        out.append((name, value))
    elif isinstance(value, Module):
        out.extend(value.named_parameters(prefix=name + "."))
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            if isinstance(item, (Parameter, Module, list, tuple)):
                _collect(f"{name}.{i}", item, out)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, precision: Precision, bias: bool = True):
        self.weight = Parameter(glorot_uniform((d_in, d_out), rng, precision))
        self.bias = Parameter(zeros((d_out,), precision)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, precision: Precision, eps: float = 1e-5):
        self.gamma = Parameter(ones((d,), precision))
        self.beta = Parameter(zeros((d,), precision))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num: int, d: int, rng: np.random.Generator, precision: Precision):
        self.num = num
        self.table = Parameter(glorot_uniform((num, d), rng, precision))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num):
            bad = int(np.flatnonzero((ids < 0) | (ids >= self.num))[0])
            raise IndexRangeError(f"id {int(ids[bad])} at position {bad} outside table of size {self.num}")
        return take_rows(self.table, ids)


class FieldEmbedding(Module):
    """Sum of one lookup table per categorical column."""

    def __init__(self, sizes: Sequence[int], d: int, rng: np.random.Generator, precision: Precision):
        self.fields = [Embedding(n, d, rng, precision) for n in sizes]

    def __call__(self, features: np.ndarray) -> Tensor:
        features = np.asarray(features, dtype=np.int64).reshape(len(features), -1)
        if features.shape[1] != len(self.fields):
            raise IndexRangeError(f"expected {len(self.fields)} feature columns, got {features.shape[1]}")
        out = self.fields[0](features[:, 0])
        for col in range(1, len(self.fields)):
            out = out + self.fields[col](features[:, col])
        return out


class MLP(Module):
    """Linear layers with an activation between consecutive layers (none after the last)."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, precision: Precision,
                 activation: Callable[[Tensor], Tensor] = relu):
        self.layers = [Linear(a, b, rng, precision) for a, b in zip(dims[:-1], dims[1:])]
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x
