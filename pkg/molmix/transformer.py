"""Pre-layer-norm transformer encoder over packed (varlen) batches."""

from __future__ import annotations

from typing import List

import numpy as np

from .attention import DEFAULT_BLOCK, Impl, MultiHeadAttention, PackedBatch, self_attention
from .config import Precision
from .layers import MLP, LayerNorm, Module
from .tensor import Tensor, no_grad


class TransformerBlock(Module):
    """x + Attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d: int, heads: int, ffn_mult: int, rng: np.random.Generator, precision: Precision,
                 eps: float = 1e-5, impl: Impl = "tiled", block: int = DEFAULT_BLOCK):
        self.ln1 = LayerNorm(d, precision, eps)
        self.attn = MultiHeadAttention(d, heads, rng, precision)
        self.ln2 = LayerNorm(d, precision, eps)
        self.ffn = MLP([d, ffn_mult * d, d], rng, precision)
        self.impl = impl
        self.block = block

    def __call__(self, packed: PackedBatch) -> Tensor:
        x = packed.tokens
        x = x + self_attention(packed.with_tokens(self.ln1(x)), self.attn, self.impl, self.block)
        return x + self.ffn(self.ln2(x))


class TransformerEncoder(Module):
    def __init__(self, d: int, heads: int, layers: int, ffn_mult: int, rng: np.random.Generator,
                 precision: Precision, eps: float = 1e-5, impl: Impl = "tiled", block: int = DEFAULT_BLOCK):
        self.blocks = [TransformerBlock(d, heads, ffn_mult, rng, precision, eps, impl, block)
                       for _ in range(layers)]
        self.norm = LayerNorm(d, precision, eps)

    def __call__(self, packed: PackedBatch) -> Tensor:
        for blk in self.blocks:
            packed = packed.with_tokens(blk(packed))
        return self.norm(packed.tokens)

    def attention_inputs(self, packed: PackedBatch) -> List[np.ndarray]:
        """Normalised input each block feeds its attention, one array per layer."""
        captured = []
        with no_grad():
            for blk in self.blocks:
                captured.append(blk.ln1(packed.tokens).data)
                packed = packed.with_tokens(blk(packed))
        return captured
