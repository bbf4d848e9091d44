"""
Multimodal fusion: one token sequence per molecule

    [CLS, 1D tokens..., SEP, 2D tokens (layer-major)..., SEP, 3D tokens (conformer-major)..., SEP]

Each modality block is projected d_enc -> d_model by its own linear layer and
gets its learned modality vector; disabled modalities drop out together with
their SEP. No per-token positional encoding is added in the downstream
transformer, so relabelling atoms or reordering conformers only permutes
tokens and the CLS readout is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np

from .attention import PackedBatch
from .conf3d_encoder import ConformerEncoder
from .config import ModalityMask, ModelConfig, Precision
from .errors import ConfigError, DataError
from .graph2d_encoder import GraphEncoder, LayerEmbeddings
from .layers import MLP, Linear, Module
from .smiles_encoder import SmilesEncoder
from .tensor import Parameter, Tensor, concat, glorot_uniform, reshape, take_rows
from .transformer import TransformerEncoder

if TYPE_CHECKING:
    from .data import Molecule

CLS, SEP, TOK_1D, TOK_2D, TOK_3D = "CLS", "SEP", "1D", "2D", "3D"

# readout.layers.1 is the last linear layer: the only part trained in transfer runs
READOUT_FINAL = "fusion.readout.layers.1"


def sequence_length(n_chars: int, n_atoms: int, n_layers: int, n_conformers: int,
                    mask: Optional[ModalityMask] = None) -> int:
    """Token count of one fused sequence: n + |V|(J + k) + 4 with everything enabled."""
    mask = mask or ModalityMask()
    length = 1
    if mask.use_1d:
        length += n_chars + 1
    if mask.use_2d:
        length += n_atoms * n_layers + 1
    if mask.use_3d:
        length += n_atoms * n_conformers + 1
    return length


class ModalityEncoding(Module):
    def __init__(self, d: int, rng: np.random.Generator, precision: Precision):
        self.enc_1d = Parameter(glorot_uniform((d,), rng, precision))
        self.enc_2d = Parameter(glorot_uniform((d,), rng, precision))
        self.enc_3d = Parameter(glorot_uniform((d,), rng, precision))


class SpecialTokens(Module):
    def __init__(self, d: int, rng: np.random.Generator, precision: Precision):
        self.cls = Parameter(glorot_uniform((d,), rng, precision))
        self.sep = Parameter(glorot_uniform((d,), rng, precision))


@dataclass
class FusionSequence:
    tokens: Tensor
    labels: List[str]
    # (char index, atom id, layer id, conformer id); -1 where not applicable
    provenance: List[Tuple[int, int, int, int]] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.labels)

    @property
    def sep_positions(self) -> List[int]:
        return [i for i, lab in enumerate(self.labels) if lab == SEP]


class FusionHead(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, precision: Precision):
        self.d_enc = cfg.d_enc
        self.proj_1d = Linear(cfg.d_enc, cfg.d_model, rng, precision)
        self.proj_2d = Linear(cfg.d_enc, cfg.d_model, rng, precision)
        self.proj_3d = Linear(cfg.d_enc, cfg.d_model, rng, precision)
        self.modality = ModalityEncoding(cfg.d_model, rng, precision)
        self.special = SpecialTokens(cfg.d_model, rng, precision)
        self.transformer = TransformerEncoder(cfg.d_model, cfg.fusion_heads, cfg.fusion_layers, cfg.ffn_mult,
                                              rng, precision, cfg.layer_norm_eps, cfg.attention, cfg.block_size)
        self.readout = MLP([cfg.d_model, cfg.d_model, cfg.n_targets], rng, precision)


def _row(p: Parameter) -> Tensor:
    return reshape(p, (1, p.shape[0]))


def _check_width(name: str, t: Tensor, d_enc: int) -> None:
    if t.ndim != 2 or t.shape[1] != d_enc:
        raise ConfigError(f"{name} encoding has shape {t.shape}, expected rows of width {d_enc}")


def build_sequence(h1d: Optional[Tensor], h2d: Optional[LayerEmbeddings], h3d: Optional[Sequence[Tensor]],
                   mask: ModalityMask, params: FusionHead) -> FusionSequence:
    use_1d = mask.use_1d and h1d is not None
    use_2d = mask.use_2d and h2d is not None and h2d.n_layers > 0
    use_3d = mask.use_3d and h3d is not None and len(h3d) > 0
    if not (use_1d or use_2d or use_3d):
        raise ConfigError(f"no enabled modality has an encoding (mask {mask.label})")
    for flag, on, name in ((mask.use_1d, use_1d, "1d"), (mask.use_2d, use_2d, "2d"), (mask.use_3d, use_3d, "3d")):
        if flag and not on:
            raise ConfigError(f"modality {name} is enabled but no encoding was given")

    pieces: List[Tensor] = [_row(params.special.cls)]
    labels: List[str] = [CLS]
    prov: List[Tuple[int, int, int, int]] = [(-1, -1, -1, -1)]
    sep = _row(params.special.sep)

    if use_1d:
        _check_width("1d", h1d, params.d_enc)
        pieces.append(params.proj_1d(h1d) + params.modality.enc_1d)
        n = h1d.shape[0]
        labels += [TOK_1D] * n
        prov += [(i, -1, -1, -1) for i in range(n)]
        pieces.append(sep)
        labels.append(SEP)
        prov.append((-1, -1, -1, -1))
    if use_2d:
        for h in h2d.per_layer:
            _check_width("2d", h, params.d_enc)
        stacked = h2d.per_layer[0] if h2d.n_layers == 1 else concat(h2d.per_layer, axis=0)
        pieces.append(params.proj_2d(stacked) + params.modality.enc_2d)
        n_atoms = h2d.n_atoms
        labels += [TOK_2D] * (n_atoms * h2d.n_layers)
        prov += [(-1, v, j, -1) for j in range(h2d.n_layers) for v in range(n_atoms)]
        pieces.append(sep)
        labels.append(SEP)
        prov.append((-1, -1, -1, -1))
    if use_3d:
        for h in h3d:
            _check_width("3d", h, params.d_enc)
        stacked = h3d[0] if len(h3d) == 1 else concat(list(h3d), axis=0)
        pieces.append(params.proj_3d(stacked) + params.modality.enc_3d)
        for c, h in enumerate(h3d):
            labels += [TOK_3D] * h.shape[0]
            prov += [(-1, v, -1, c) for v in range(h.shape[0])]
        pieces.append(sep)
        labels.append(SEP)
        prov.append((-1, -1, -1, -1))

    return FusionSequence(concat(pieces, axis=0), labels, prov)


def pack_sequences(seqs: Sequence[FusionSequence]) -> PackedBatch:
    return PackedBatch.pack([s.tokens for s in seqs], [s.labels for s in seqs])


def forward_packed(packed: PackedBatch, params: FusionHead) -> Tensor:
    """Downstream transformer over every segment, readout on each CLS row -> [segments x targets]."""
    h = params.transformer(packed)
    cls_rows = take_rows(h, packed.seq_offsets[:-1])
    return params.readout(cls_rows)


def forward(seq: FusionSequence, params: FusionHead) -> Tensor:
    return forward_packed(PackedBatch.single(seq.tokens, seq.labels), params)


class MolMix(Module):
    """f_theta(S, G, {c_1..c_k}): three modality encoders feeding the fusion head."""

    def __init__(self, cfg: ModelConfig, precision: Precision = Precision.F32, seed: int = 0):
        self.cfg = cfg
        self.precision = Precision(precision)
        rng = np.random.default_rng(seed)
        self.smiles = SmilesEncoder(cfg, rng, self.precision)
        self.graph2d = GraphEncoder(cfg, rng, self.precision)
        self.conf3d = ConformerEncoder(cfg, rng, self.precision)
        self.fusion = FusionHead(cfg, rng, self.precision)

    def token_count(self, mol: "Molecule", mask: ModalityMask) -> int:
        """Fused sequence length, touching only the data the mask enables."""
        n_chars = len(mol.smiles) if mask.use_1d else 0
        n_atoms = mol.graph.n_atoms if (mask.use_2d or mask.use_3d) else 0
        k = len(mol.conformers) if mask.use_3d else 0
        return sequence_length(n_chars, n_atoms, self.cfg.gine_layers, k, mask)

    def encode(self, molecules: Sequence["Molecule"], mask: ModalityMask) -> List[FusionSequence]:
        n = len(molecules)
        h1d: List[Optional[Tensor]] = [None] * n
        h2d: List[Optional[LayerEmbeddings]] = [None] * n
        h3d: List[Optional[List[Tensor]]] = [None] * n
        if mask.use_1d:
            h1d = self.smiles.encode_batch([self.smiles.tokenize(m.smiles) for m in molecules])
        if mask.use_2d:
            h2d = self.graph2d.encode_batch([m.graph for m in molecules])
        if mask.use_3d:
            for m in molecules:
                if not m.conformers:
                    raise DataError(f"molecule {m.id} has no conformers but the 3d modality is enabled")
            h3d = self.conf3d.encode_batch([m.graph for m in molecules], [m.conformers for m in molecules])
        return [build_sequence(h1d[i], h2d[i], h3d[i], mask, self.fusion) for i in range(n)]

    def forward_batch(self, molecules: Sequence["Molecule"], mask: ModalityMask) -> Tensor:
        if not molecules:
            raise DataError("empty batch")
        return forward_packed(pack_sequences(self.encode(molecules, mask)), self.fusion)

    def predict(self, molecule: "Molecule", mask: ModalityMask) -> np.ndarray:
        return self.forward_batch([molecule], mask).data[0].copy()


def predict(molecule: "Molecule", mask: ModalityMask, params: MolMix) -> np.ndarray:
    """One prediction per target for a single molecule."""
    return params.predict(molecule, mask)
