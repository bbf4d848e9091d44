"""
SMILES (1D) encoder: character-level tokenizer + small transformer.

Each character is one token (no atom-level regex); ids 0 and 1 are reserved
for PAD and UNK. Embeddings get a fixed sinusoidal positional encoding before
the transformer; sequences of a batch are packed, never padded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np

from .attention import PackedBatch
from .config import ModelConfig, Precision
from .errors import InputError
from .layers import Embedding, Module
from .tensor import Tensor, as_tensor, rows
from .transformer import TransformerEncoder

logger = logging.getLogger(__name__)

PAD = 0
UNK = 1
N_RESERVED = 2


@dataclass(frozen=True)
class SmilesVocab:
    chars: tuple

    @cached_property
    def char_to_id(self) -> Dict[str, int]:
        return {c: i + N_RESERVED for i, c in enumerate(self.chars)}

    @cached_property
    def id_to_char(self) -> Dict[int, str]:
        return {i + N_RESERVED: c for i, c in enumerate(self.chars)}

    @property
    def size(self) -> int:
        return len(self.chars) + N_RESERVED

    def save(self, path: Union[str, Path]) -> None:
        # line number = id - 2
        Path(path).write_text("".join(c + "\n" for c in self.chars), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SmilesVocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(tuple(line for line in text.split("\n") if line))


@dataclass(frozen=True)
class SmilesTokens:
    ids: np.ndarray

    @property
    def n(self) -> int:
        return int(self.ids.shape[0])

    def __len__(self) -> int:
        return self.n


def build_vocab(corpus: Iterable[str]) -> SmilesVocab:
    corpus = list(corpus)
    if not corpus:
        raise InputError("cannot build a vocabulary from an empty corpus")
    chars = sorted({c for s in corpus for c in s})
    logger.debug("SMILES vocabulary: %d characters from %d strings", len(chars), len(corpus))
    return SmilesVocab(tuple(chars))


def tokenize(s: str, vocab: SmilesVocab) -> SmilesTokens:
    if not s:
        raise InputError("cannot tokenize an empty SMILES string")
    lookup = vocab.char_to_id
    return SmilesTokens(np.array([lookup.get(c, UNK) for c in s], dtype=np.int64))


def decode(tokens: SmilesTokens, vocab: SmilesVocab, unk: str = "?") -> str:
    lookup = vocab.id_to_char
    return "".join(lookup.get(int(i), unk) for i in tokens.ids if int(i) != PAD)


def sinusoidal_encoding(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class SmilesEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, precision: Precision):
        self.vocab = SmilesVocab(tuple(cfg.smiles_vocab))
        self.embedding = Embedding(self.vocab.size, cfg.d_enc, rng, precision)
        self.transformer = TransformerEncoder(cfg.d_enc, cfg.smiles_heads, cfg.smiles_layers, cfg.ffn_mult,
                                              rng, precision, cfg.layer_norm_eps, cfg.attention, cfg.block_size)
        self.d_enc = cfg.d_enc

    def tokenize(self, s: str) -> SmilesTokens:
        return tokenize(s, self.vocab)

    def embed(self, batch: Sequence[SmilesTokens]) -> PackedBatch:
        """z_i = e_i + PE(i), positions restarting at 0 in every sequence."""
        for t in batch:
            if t.n < 1:
                raise InputError("empty token sequence")
        ids = np.concatenate([t.ids for t in batch])
        pe = np.concatenate([sinusoidal_encoding(t.n, self.d_enc) for t in batch])
        z = self.embedding(ids) + as_tensor(pe, like=self.embedding.table)
        offsets = np.concatenate([[0], np.cumsum([t.n for t in batch])]).tolist()
        return PackedBatch(z, offsets)

    def encode_batch(self, batch: Sequence[SmilesTokens]) -> List[Tensor]:
        packed = self.embed(batch)
        h = self.transformer(packed)
        if packed.n_segments == 1:
            return [h]
        return [rows(h, a, b) for a, b in zip(packed.seq_offsets[:-1], packed.seq_offsets[1:])]

    def __call__(self, tokens: SmilesTokens) -> Tensor:
        return self.encode_batch([tokens])[0]


def encode_smiles(tokens: SmilesTokens, params: SmilesEncoder) -> Tensor:
    """One d_enc row per character."""
    return params(tokens)
