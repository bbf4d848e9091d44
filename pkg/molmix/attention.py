"""
Multi-head self-attention in two interchangeable implementations.

- mha_naive: materialises the full softmax(QK^T / sqrt(d_h)) matrix per head
  through ordinary autodiff ops.
- mha_tiled: streams key/value blocks with the online-softmax recurrence
  (running row max m, running denominator l, rescaled accumulator) over a
  varlen-packed batch; the backward pass recomputes scores per block from the
  saved log-sum-exp, so no L x L matrix exists at any point.

Both count the attention scratch they hold in a ScratchCounter. For the tiled
path the per-segment peak is

    H * L * B          (score block, exponentiated in place)
  + H * L * (d_h + 2)  (accumulator, running max, running denominator)
  + H * L              (log-sum-exp written at segment end)

so with c = H * (d_h + 3) the bound H * L_max * B + c * L_max holds. The naive
path retains scores and probabilities for every head of every segment:
2 * H * sum(L_i^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Union

import numpy as np

from .config import Precision
from .errors import ConfigError, ContractError, IndexRangeError
from .layers import Linear, Module
from .tensor import Tensor, concat, cols, from_op, matmul, no_grad, rows, softmax_rowwise, transpose

DEFAULT_BLOCK = 32
DUMP_CLIP = 10.0


@dataclass
class PackedBatch:
    """Token rows of several sequences laid end to end.

    seq_offsets has one entry per segment start plus the sentinel L_total;
    labels optionally tags every token (CLS / SEP / 1D / 2D / 3D)."""

    tokens: Tensor
    seq_offsets: List[int]
    labels: Optional[List[str]] = None

    def __post_init__(self):
        offs = [int(o) for o in self.seq_offsets]
        total = self.tokens.shape[0]
        if len(offs) < 2 or offs[0] != 0 or offs[-1] != total:
            raise ContractError(f"seq_offsets must start at 0 and end at {total}, got {offs}")
        for i, (a, b) in enumerate(zip(offs[:-1], offs[1:])):
            if b <= a:
                raise ContractError(f"empty or reversed segment {i}: offsets {a}..{b}")
        if self.labels is not None and len(self.labels) != total:
            raise ContractError(f"{len(self.labels)} labels for {total} tokens")
        self.seq_offsets = offs

    @classmethod
    def single(cls, tokens: Tensor, labels: Optional[List[str]] = None) -> "PackedBatch":
        return cls(tokens, [0, tokens.shape[0]], labels)

    @classmethod
    def pack(cls, segments: Sequence[Tensor], labels: Optional[Sequence[List[str]]] = None) -> "PackedBatch":
        offsets = [0]
        for seg in segments:
            offsets.append(offsets[-1] + seg.shape[0])
        flat = None if labels is None else [lab for seg in labels for lab in seg]
        tokens = segments[0] if len(segments) == 1 else concat(segments, axis=0)
        return cls(tokens, offsets, flat)

    def with_tokens(self, tokens: Tensor) -> "PackedBatch":
        out = PackedBatch.__new__(PackedBatch)
        out.tokens, out.seq_offsets, out.labels = tokens, self.seq_offsets, self.labels
        return out

    @property
    def n_segments(self) -> int:
        return len(self.seq_offsets) - 1

    @property
    def lengths(self) -> List[int]:
        return [b - a for a, b in zip(self.seq_offsets[:-1], self.seq_offsets[1:])]

    @property
    def max_len(self) -> int:
        return max(self.lengths)

    def bounds(self, i: int) -> tuple:
        if not 0 <= i < self.n_segments:
            raise IndexRangeError(f"segment {i} out of range for {self.n_segments} segments")
        return self.seq_offsets[i], self.seq_offsets[i + 1]


@dataclass
class AttentionStats:
    peak_scratch_elements: int = 0
    flops_estimate: int = 0


class ScratchCounter:
    """Per-call bookkeeping of attention scratch elements."""

    def __init__(self):
        self.current = 0
        self.peak = 0
        self.flops = 0

    def alloc(self, n: int) -> None:
        self.current += int(n)
        self.peak = max(self.peak, self.current)

    def free(self, n: int) -> None:
        self.current -= int(n)

    def stats(self) -> AttentionStats:
        return AttentionStats(peak_scratch_elements=self.peak, flops_estimate=self.flops)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, precision: Precision):
        if heads < 1 or d % heads:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.wq = Linear(d, d, rng, precision)
        self.wk = Linear(d, d, rng, precision)
        self.wv = Linear(d, d, rng, precision)
        self.wo = Linear(d, d, rng, precision)


def _check_heads(d: int, heads: int) -> int:
    if heads < 1 or d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    return d // heads


def mha_naive(q: Tensor, k: Tensor, v: Tensor, heads: int, params: MultiHeadAttention,
              counter: Optional[ScratchCounter] = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_h)) V per head, concatenated and output-projected."""
    d_h = _check_heads(q.shape[1], heads)
    Q, K, V = params.wq(q), params.wk(k), params.wv(v)
    scale = 1.0 / math.sqrt(d_h)
    n_q, n_k = Q.shape[0], K.shape[0]
    outs = []
    for h in range(heads):
        lo, hi = h * d_h, (h + 1) * d_h
        scores = matmul(cols(Q, lo, hi), transpose(cols(K, lo, hi))) * scale
        probs = softmax_rowwise(scores)
        outs.append(matmul(probs, cols(V, lo, hi)))
        if counter is not None:
            counter.alloc(2 * n_q * n_k)
            counter.flops += 4 * n_q * n_k * d_h + 5 * n_q * n_k
    o = outs[0] if heads == 1 else concat(outs, axis=1)
    return params.wo(o)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    L, d = x.shape
    return x.reshape(L, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    H, L, d_h = x.shape
    return x.transpose(1, 0, 2).reshape(L, H * d_h)


def flash_attention(Q: Tensor, K: Tensor, V: Tensor, seq_offsets: Sequence[int], heads: int,
                    block: int = DEFAULT_BLOCK, counter: Optional[ScratchCounter] = None) -> Tensor:
    """Segment-local attention over projected Q, K, V with streaming key blocks."""
    if block < 1:
        raise ContractError(f"block size must be >= 1, got {block}")
    L, d = Q.shape
    d_h = _check_heads(d, heads)
    scale = 1.0 / math.sqrt(d_h)
    q, k, v = _split_heads(Q.data, heads), _split_heads(K.data, heads), _split_heads(V.data, heads)
    out = np.empty_like(q)
    lse = np.empty(q.shape[:2], dtype=q.dtype)
    offsets = list(seq_offsets)

    for a, b in zip(offsets[:-1], offsets[1:]):
        n = b - a
        if n <= 0:
            raise ContractError(f"empty segment at offset {a}")
        qs = q[:, a:b]
        m = np.full((heads, n), -np.inf, dtype=q.dtype)
        l = np.zeros((heads, n), dtype=q.dtype)
        acc = np.zeros((heads, n, d_h), dtype=q.dtype)
        if counter is not None:
            counter.alloc(heads * n * (d_h + 2))
        for j in range(a, b, block):
            kj, vj = k[:, j:min(j + block, b)], v[:, j:min(j + block, b)]
            width = kj.shape[1]
            if counter is not None:
                counter.alloc(heads * n * width)
                counter.flops += 4 * heads * n * width * d_h + 5 * heads * n * width
            s = np.matmul(qs, kj.transpose(0, 2, 1)) * scale
            m_new = np.maximum(m, s.max(axis=-1))
            p = np.exp(s - m_new[..., None])
            alpha = np.exp(m - m_new)
            l = alpha * l + p.sum(axis=-1)
            acc = acc * alpha[..., None] + np.matmul(p, vj)
            m = m_new
            if counter is not None:
                counter.free(heads * n * width)
                counter.flops += heads * n * (d_h + 2)
        if counter is not None:
            counter.alloc(heads * n)
        out[:, a:b] = acc / l[..., None]
        lse[:, a:b] = m + np.log(l)
        if counter is not None:
            counter.free(heads * n * (d_h + 3))

    def backward(g):
        go = _split_heads(g, heads)
        dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
        for a, b in zip(offsets[:-1], offsets[1:]):
            qs, gs = q[:, a:b], go[:, a:b]
            delta = (gs * out[:, a:b]).sum(axis=-1)
            lse_s = lse[:, a:b]
            for j in range(a, b, block):
                hi = min(j + block, b)
                kj, vj = k[:, j:hi], v[:, j:hi]
                p = np.exp(np.matmul(qs, kj.transpose(0, 2, 1)) * scale - lse_s[..., None])
                dv[:, j:hi] += np.matmul(p.transpose(0, 2, 1), gs)
                dp = np.matmul(gs, vj.transpose(0, 2, 1))
                ds = p * (dp - delta[..., None]) * scale
                dq[:, a:b] += np.matmul(ds, kj)
                dk[:, j:hi] += np.matmul(ds.transpose(0, 2, 1), qs)
        return _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)

    return from_op(_merge_heads(out), (Q, K, V), backward)


def mha_tiled(packed: PackedBatch, heads: int, block: int, params: MultiHeadAttention,
              counter: Optional[ScratchCounter] = None) -> Tensor:
    x = packed.tokens
    Q, K, V = params.wq(x), params.wk(x), params.wv(x)
    return params.wo(flash_attention(Q, K, V, packed.seq_offsets, heads, block, counter))


def mha_naive_packed(packed: PackedBatch, heads: int, params: MultiHeadAttention,
                     counter: Optional[ScratchCounter] = None) -> Tensor:
    """mha_naive applied segment by segment."""
    outs = []
    for i in range(packed.n_segments):
        a, b = packed.bounds(i)
        seg = packed.tokens if packed.n_segments == 1 else rows(packed.tokens, a, b)
        outs.append(mha_naive(seg, seg, seg, heads, params, counter))
    return outs[0] if len(outs) == 1 else concat(outs, axis=0)


Impl = Literal["naive", "tiled"]


def self_attention(packed: PackedBatch, params: MultiHeadAttention, impl: Impl = "tiled",
                   block: int = DEFAULT_BLOCK, counter: Optional[ScratchCounter] = None) -> Tensor:
    if impl == "tiled":
        return mha_tiled(packed, params.heads, block, params, counter)
    if impl == "naive":
        return mha_naive_packed(packed, params.heads, params, counter)
    raise ConfigError(f"unknown attention implementation {impl!r}")


def measure_stats(impl: Impl, packed: PackedBatch, heads: int, block: int = DEFAULT_BLOCK,
                  params: Optional[MultiHeadAttention] = None, seed: int = 0) -> AttentionStats:
    """Run one instrumented forward pass; counts are a pure function of the shapes."""
    if params is None:
        params = MultiHeadAttention(packed.tokens.shape[1], heads, np.random.default_rng(seed),
                                    packed.tokens.precision)
    counter = ScratchCounter()
    with no_grad():
        self_attention(packed, params, impl, block, counter)
    return counter.stats()


# -- score dumps ------------------------------------------------------------------------

def attention_scores(x: np.ndarray, params: MultiHeadAttention, head: int) -> np.ndarray:
    """Scaled pre-softmax scores of one head for the (already normalised) rows x."""
    if not 0 <= head < params.heads:
        raise IndexRangeError(f"head {head} out of range for {params.heads} heads")
    d_h = params.d // params.heads
    lo, hi = head * d_h, (head + 1) * d_h
    q = x @ params.wq.weight.data[:, lo:hi] + params.wq.bias.data[lo:hi]
    k = x @ params.wk.weight.data[:, lo:hi] + params.wk.bias.data[lo:hi]
    return (q @ k.T) / math.sqrt(d_h)


@dataclass
class ScoreDump:
    scores: np.ndarray
    boundaries: List[int] = field(default_factory=list)
    layer: int = 0
    head: int = 0

    def write(self, path: Union[str, Path]) -> None:
        rows_, cols_ = self.scores.shape
        header = f"{rows_} {cols_} boundaries={','.join(str(b) for b in self.boundaries)}"
        np.savetxt(path, self.scores, fmt="%.6f", delimiter=" ", header=header, comments="# ")

    @classmethod
    def read(cls, path: Union[str, Path]) -> "ScoreDump":
        with open(path) as fh:
            header = fh.readline()
        parts = header.lstrip("#").split()
        n_rows, n_cols = int(parts[0]), int(parts[1])
        spec = parts[2].split("=", 1)[1] if len(parts) > 2 else ""
        bounds = [int(b) for b in spec.split(",") if b]
        scores = np.loadtxt(path, comments="#", ndmin=2).reshape(n_rows, n_cols)
        return cls(scores=scores, boundaries=bounds)


def attn_scores_dump(encoder, packed: PackedBatch, layer: int, head: int, segment: int = 0,
                     clip: float = DUMP_CLIP) -> ScoreDump:
    """Pre-softmax scores of one segment at (layer, head), clipped to [-clip, clip].

    `encoder` is a TransformerEncoder (anything exposing `blocks` with an `attn`
    and `attention_inputs(packed)`). Boundaries are the segment-relative
    positions of SEP tokens."""
    if not 0 <= layer < len(encoder.blocks):
        raise IndexRangeError(f"layer {layer} out of range for {len(encoder.blocks)} layers")
    params = encoder.blocks[layer].attn
    if not 0 <= head < params.heads:
        raise IndexRangeError(f"head {head} out of range for {params.heads} heads")
    a, b = packed.bounds(segment)
    inputs = encoder.attention_inputs(packed)
    scores = np.clip(attention_scores(inputs[layer][a:b], params, head), -clip, clip)
    labels = packed.labels[a:b] if packed.labels is not None else []
    boundaries = [i for i, lab in enumerate(labels) if lab == "SEP"]
    return ScoreDump(scores=scores, boundaries=boundaries, layer=layer, head=head)
