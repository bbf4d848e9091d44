"""
2D encoder: GINE message passing over the bond graph.

    h_v' = h_v + LN(MLP((1 + eps) * h_v + sum_{u in N(v)} ReLU(h_u + W_e e_uv)))

eps is a learned scalar per layer starting at 0; W_e e_uv is a per-layer
lookup over the categorical bond columns. Every layer's output is kept so the
fusion sequence can carry all J depths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .config import ModelConfig, Precision
from .errors import ConfigError, DataError
from .layers import MLP, FieldEmbedding, LayerNorm, Module
from .tensor import Parameter, Tensor, relu, rows, scatter_sum, take_rows, zeros


def _as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.int64)
    return arr if arr.ndim == 2 else arr.reshape(arr.shape[0], 1)


@dataclass
class MolGraph:
    """Atoms with categorical feature columns; bonds stored as directed pairs in both directions."""

    atom_features: np.ndarray
    edge_index: np.ndarray
    edge_features: np.ndarray

    def __post_init__(self):
        self.atom_features = _as_matrix(self.atom_features)
        self.edge_index = np.asarray(self.edge_index, dtype=np.int64).reshape(2, -1)
        self.edge_features = _as_matrix(self.edge_features)
        if self.edge_features.shape[0] != self.n_edges:
            raise DataError(f"{self.edge_features.shape[0]} bond feature rows for {self.n_edges} directed bonds")
        n = self.n_atoms
        src, dst = self.edge_index
        if np.any(src == dst):
            raise DataError(f"self-loop on atom {int(src[src == dst][0])}")
        if self.n_edges and (self.edge_index.min() < 0 or self.edge_index.max() >= n):
            raise DataError(f"bond endpoint outside 0..{n - 1}")
        directed: Dict[Tuple[int, int], tuple] = {}
        for e in range(self.n_edges):
            pair = (int(src[e]), int(dst[e]))
            if pair in directed:
                raise DataError(f"duplicate directed bond {pair}")
            directed[pair] = tuple(self.edge_features[e])
        for (u, v), feats in directed.items():
            if directed.get((v, u)) != feats:
                raise DataError(f"bond ({u}, {v}) lacks a reverse copy with identical features")

    @property
    def n_atoms(self) -> int:
        return int(self.atom_features.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edge_index.shape[1])

    @classmethod
    def from_bonds(cls, atom_features, bonds: Sequence[Sequence[int]]) -> "MolGraph":
        """bonds: (u, v, bond feature...) listed once; the reverse copy is added here."""
        edges, feats = [], []
        for bond in bonds:
            u, v, rest = int(bond[0]), int(bond[1]), [int(x) for x in bond[2:]]
            edges.extend([(u, v), (v, u)])
            feats.extend([rest, rest])
        edge_index = np.array(edges, dtype=np.int64).T.reshape(2, -1)
        width = len(feats[0]) if feats else 1
        return cls(atom_features, edge_index, np.array(feats, dtype=np.int64).reshape(-1, width))

    def permute(self, order: Sequence[int]) -> "MolGraph":
        """New atom i is old atom order[i]."""
        order = np.asarray(order, dtype=np.int64)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        return MolGraph(self.atom_features[order], inverse[self.edge_index], self.edge_features.copy())

    @staticmethod
    def union(graphs: Sequence["MolGraph"]) -> Tuple["MolGraph", List[int]]:
        """Disjoint union; returns the merged graph and per-graph atom offsets (with sentinel)."""
        offsets = [0]
        for g in graphs:
            offsets.append(offsets[-1] + g.n_atoms)
        merged = MolGraph.__new__(MolGraph)
        merged.atom_features = np.concatenate([g.atom_features for g in graphs])
        merged.edge_index = np.concatenate([g.edge_index + off for g, off in zip(graphs, offsets)], axis=1)
        merged.edge_features = np.concatenate([g.edge_features for g in graphs])
        return merged, offsets


@dataclass
class LayerEmbeddings:
    per_layer: List[Tensor] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.per_layer)

    @property
    def n_atoms(self) -> int:
        return self.per_layer[0].shape[0]


class GINELayer(Module):
    def __init__(self, d: int, bond_sizes: Sequence[int], rng: np.random.Generator, precision: Precision,
                 eps: float = 1e-5):
        self.eps = Parameter(zeros((1,), precision))
        self.edge = FieldEmbedding(bond_sizes, d, rng, precision)
        self.mlp = MLP([d, 2 * d, d], rng, precision)
        self.norm = LayerNorm(d, precision, eps)

    def __call__(self, h: Tensor, graph: MolGraph) -> Tensor:
        return gine_layer(h, graph, self)


def gine_layer(h: Tensor, graph: MolGraph, params: GINELayer) -> Tensor:
    d = h.shape[1]
    agg = (params.eps + 1.0) * h
    if graph.n_edges:
        e = params.edge(graph.edge_features)
        if e.shape[1] != d:
            raise ConfigError(f"projected bond features have width {e.shape[1]}, node states {d}")
        src, dst = graph.edge_index
        messages = relu(take_rows(h, src) + e)
        agg = agg + scatter_sum(messages, dst, graph.n_atoms)
    return h + params.norm(params.mlp(agg))


class GraphEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, precision: Precision):
        self.atoms = FieldEmbedding(cfg.atom_feature_sizes, cfg.d_enc, rng, precision)
        self.layers = [GINELayer(cfg.d_enc, [cfg.num_bond_types], rng, precision, cfg.layer_norm_eps)
                       for _ in range(cfg.gine_layers)]

    def __call__(self, graph: MolGraph) -> LayerEmbeddings:
        if graph.n_atoms < 1:
            raise DataError("graph has no atoms")
        h = self.atoms(graph.atom_features)
        out = []
        for layer in self.layers:
            h = layer(h, graph)
            out.append(h)
        return LayerEmbeddings(out)

    def encode_batch(self, graphs: Sequence[MolGraph]) -> List[LayerEmbeddings]:
        if len(graphs) == 1:
            return [self(graphs[0])]
        merged, offsets = MolGraph.union(graphs)
        full = self(merged)
        return [LayerEmbeddings([rows(h, a, b) for h in full.per_layer])
                for a, b in zip(offsets[:-1], offsets[1:])]


def encode_graph(graph: MolGraph, params: GraphEncoder) -> LayerEmbeddings:
    """Layers 1..J after embedding; the raw input embedding is not returned."""
    return params(graph)
