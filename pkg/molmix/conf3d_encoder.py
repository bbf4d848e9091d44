"""
3D encoder: SchNet-style continuous-filter convolutions.

Coordinates enter only through pairwise distances, expanded on Gaussian radial
basis functions and weighted by a cosine cutoff, so outputs are invariant to
rotations, reflections and translations of each conformer. Distances are
computed in float64 whatever the model precision and cast afterwards.

Defaults (r_cut 5 A, 50 RBFs, gamma 10 A^-2, 3 blocks) are SchNet conventions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np

from .config import ModelConfig, Precision
from .errors import DataError, InputError
from .graph2d_encoder import MolGraph
from .layers import MLP, FieldEmbedding, Linear, Module
from .tensor import Tensor, as_tensor, rows, scatter_sum, shifted_softplus, take_rows


@dataclass
class Conformer:
    """Atom coordinates in Angstrom, rows in the molecule's atom order."""

    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.coords)):
            raise DataError("conformer has non-finite coordinates")

    @property
    def n_atoms(self) -> int:
        return int(self.coords.shape[0])

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "Conformer":
        return Conformer(self.coords @ np.asarray(rotation).T + np.asarray(translation))

    def permute(self, order: Sequence[int]) -> "Conformer":
        return Conformer(self.coords[np.asarray(order, dtype=np.int64)])


@dataclass(frozen=True)
class RadialBasis:
    centers: np.ndarray
    gamma: float

    @classmethod
    def evenly_spaced(cls, count: int, cutoff: float, gamma: float) -> "RadialBasis":
        if count < 2:
            raise InputError(f"need at least 2 radial basis functions, got {count}")
        return cls(np.linspace(0.0, cutoff, count), float(gamma))

    def expand(self, distances: np.ndarray) -> np.ndarray:
        diff = np.asarray(distances, dtype=np.float64)[:, None] - self.centers[None, :]
        return np.exp(-self.gamma * diff * diff)


def cosine_cutoff(r: Union[float, np.ndarray], r_cut: float) -> Union[float, np.ndarray]:
    """0.5 * (cos(pi r / r_cut) + 1) inside the cutoff, 0 outside."""
    arr = np.asarray(r, dtype=np.float64)
    if np.any(arr < 0):
        raise InputError(f"negative distance passed to cutoff: {float(arr.min())}")
    out = np.where(arr < r_cut, 0.5 * (np.cos(np.pi * arr / r_cut) + 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class PairGeometry:
    """Ordered atom pairs (src -> dst) inside the cutoff with their distance features."""

    src: np.ndarray
    dst: np.ndarray
    rbf: np.ndarray
    cutoff: np.ndarray

    @classmethod
    def build(cls, coords: np.ndarray, basis: RadialBasis, r_cut: float) -> "PairGeometry":
        diff = coords[:, None, :] - coords[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=-1))
        n = coords.shape[0]
        mask = (dist < r_cut) & ~np.eye(n, dtype=bool)
        src, dst = np.nonzero(mask)
        d = dist[src, dst]
        return cls(src.astype(np.int64), dst.astype(np.int64), basis.expand(d), cosine_cutoff(d, r_cut))

    @property
    def n_pairs(self) -> int:
        return int(self.src.shape[0])

    @staticmethod
    def union(parts: Sequence["PairGeometry"], offsets: Sequence[int], n_rbf: int) -> "PairGeometry":
        return PairGeometry(
            np.concatenate([p.src + off for p, off in zip(parts, offsets)]).astype(np.int64),
            np.concatenate([p.dst + off for p, off in zip(parts, offsets)]).astype(np.int64),
            np.concatenate([p.rbf.reshape(-1, n_rbf) for p in parts]),
            np.concatenate([np.atleast_1d(p.cutoff) for p in parts]),
        )


class InteractionBlock(Module):
    def __init__(self, d: int, n_rbf: int, rng: np.random.Generator, precision: Precision):
        self.w_in = Linear(d, d, rng, precision, bias=False)
        self.filter = MLP([n_rbf, d, d], rng, precision, activation=shifted_softplus)
        self.out = MLP([d, d, d], rng, precision, activation=shifted_softplus)

    def __call__(self, h: Tensor, geom: PairGeometry) -> Tensor:
        return interaction_block(h, geom, self)


def interaction_block(h: Tensor, geom: PairGeometry, params: InteractionBlock) -> Tensor:
    """cfconv: messages (W_in h_u) * filter(rbf(d_uv)) * cutoff(d_uv) summed into v,
    then an atomwise MLP and a residual add."""
    n = h.shape[0]
    if geom.n_pairs:
        x = params.w_in(h)
        w = params.filter(as_tensor(geom.rbf, like=h)) * as_tensor(geom.cutoff[:, None], like=h)
        agg = scatter_sum(take_rows(x, geom.src) * w, geom.dst, n)
    else:
        agg = as_tensor(np.zeros((n, h.shape[1])), like=h)
    return h + params.out(agg)


class ConformerEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, precision: Precision):
        self.cutoff = cfg.cutoff
        self.basis = RadialBasis.evenly_spaced(cfg.rbf_count, cfg.cutoff, cfg.rbf_gamma)
        self.atoms = FieldEmbedding(cfg.atom_feature_sizes, cfg.d_enc, rng, precision)
        self.blocks = [InteractionBlock(cfg.d_enc, cfg.rbf_count, rng, precision)
                       for _ in range(cfg.schnet_blocks)]

    def geometry(self, conf: Conformer) -> PairGeometry:
        return PairGeometry.build(conf.coords, self.basis, self.cutoff)

    def _run(self, atom_features: np.ndarray, geom: PairGeometry) -> Tensor:
        h = self.atoms(atom_features)
        for blk in self.blocks:
            h = blk(h, geom)
        return h

    def __call__(self, graph: MolGraph, conf: Conformer) -> Tensor:
        if conf.n_atoms != graph.n_atoms:
            raise DataError(f"conformer has {conf.n_atoms} atoms, graph has {graph.n_atoms}")
        return self._run(graph.atom_features, self.geometry(conf))

    def encode_batch(self, graphs: Sequence[MolGraph], conformers: Sequence[Sequence[Conformer]]) -> List[List[Tensor]]:
        """All conformers of all molecules in one disjoint pass; returns per-molecule lists."""
        feats, geoms, offsets = [], [], [0]
        for graph, confs in zip(graphs, conformers):
            for conf in confs:
                if conf.n_atoms != graph.n_atoms:
                    raise DataError(f"conformer has {conf.n_atoms} atoms, graph has {graph.n_atoms}")
                feats.append(graph.atom_features)
                geoms.append(self.geometry(conf))
                offsets.append(offsets[-1] + graph.n_atoms)
        if not feats:
            return [[] for _ in graphs]
        h = self._run(np.concatenate(feats), PairGeometry.union(geoms, offsets[:-1], self.basis.centers.size))
        out, i = [], 0
        for confs in conformers:
            mol = []
            for _ in confs:
                mol.append(h if len(feats) == 1 else rows(h, offsets[i], offsets[i + 1]))
                i += 1
            out.append(mol)
        return out


def encode_conformer(graph: MolGraph, conf: Conformer, params: ConformerEncoder) -> Tensor:
    return params(graph, conf)
