import numpy as np
import pytest

from molmix.conf3d_encoder import (
    Conformer,
    ConformerEncoder,
    InteractionBlock,
    PairGeometry,
    RadialBasis,
    cosine_cutoff,
    encode_conformer,
    interaction_block,
)
from molmix.config import ModelConfig, Precision
from molmix.errors import DataError, InputError
from molmix.graph2d_encoder import MolGraph
from molmix.synthetic import random_rotation
from molmix.tensor import Tensor


def ssp(x):
    return np.logaddexp(0.0, x) - np.log(2.0)


def mlp_ref(x, mlp):
    a, b = mlp.layers
    return ssp(x @ a.weight.data + a.bias.data) @ b.weight.data + b.bias.data


def molecule(rng, n=6, spread=2.0):
    feats = np.stack([rng.integers(1, 10, n), rng.integers(0, 4, n), np.full(n, 2)], axis=1)
    graph = MolGraph.from_bonds(feats, [(i, i + 1, 0) for i in range(n - 1)])
    return graph, Conformer(rng.normal(scale=spread, size=(n, 3)))


@pytest.fixture
def cfg():
    return ModelConfig(d_enc=16, rbf_count=12, schnet_blocks=2)


def test_cosine_cutoff_values():
    assert cosine_cutoff(0.0, 5.0) == pytest.approx(1.0)
    assert cosine_cutoff(5.0, 5.0) == 0.0
    assert cosine_cutoff(2.5, 5.0) == pytest.approx(0.5)
    assert cosine_cutoff(7.0, 5.0) == 0.0
    with pytest.raises(InputError):
        cosine_cutoff(-0.1, 5.0)


def test_radial_basis():
    basis = RadialBasis.evenly_spaced(5, 4.0, 10.0)
    np.testing.assert_allclose(basis.centers, [0.0, 1.0, 2.0, 3.0, 4.0])
    g = basis.expand(np.array([1.0]))
    assert g.shape == (1, 5)
    assert g[0, 1] == pytest.approx(1.0)
    with pytest.raises(InputError):
        RadialBasis.evenly_spaced(1, 4.0, 10.0)


def test_pairs_respect_cutoff():
    coords = np.array([[0.0, 0, 0], [1.0, 0, 0], [7.0, 0, 0]])
    geom = PairGeometry.build(coords, RadialBasis.evenly_spaced(4, 5.0, 10.0), 5.0)
    assert sorted(zip(geom.src.tolist(), geom.dst.tolist())) == [(0, 1), (1, 0)]


def test_interaction_matches_loop_reference(cfg, rng):
    block = InteractionBlock(16, 12, rng, Precision.F64)
    graph, conf = molecule(rng)
    enc = ConformerEncoder(cfg, rng, Precision.F64)
    geom = enc.geometry(conf)
    h = rng.normal(size=(6, 16))
    x = h @ block.w_in.weight.data
    agg = np.zeros_like(h)
    for u in range(6):
        for v in range(6):
            d = np.linalg.norm(conf.coords[u] - conf.coords[v])
            if u == v or d >= cfg.cutoff:
                continue
            w = mlp_ref(enc.basis.expand(np.array([d])), block.filter)[0] * cosine_cutoff(d, cfg.cutoff)
            agg[v] += x[u] * w
    expected = h + mlp_ref(agg, block.out)
    np.testing.assert_allclose(interaction_block(Tensor(h), geom, block).data, expected, atol=1e-12)


def test_output_shape_default_width(rng):
    enc = ConformerEncoder(ModelConfig(), rng, Precision.F32)
    graph, conf = molecule(rng, n=4)
    assert encode_conformer(graph, conf, enc).shape == (4, 128)


def test_single_atom_has_no_messages(cfg, rng):
    enc = ConformerEncoder(cfg, rng, Precision.F64)
    graph, conf = molecule(rng, n=1)
    h = enc.atoms(graph.atom_features)
    for blk in enc.blocks:
        h = h + blk.out(Tensor(np.zeros((1, 16))))
    np.testing.assert_allclose(enc(graph, conf).data, h.data, atol=1e-12)


def test_far_atoms_encode_independently(cfg, rng):
    enc = ConformerEncoder(cfg, rng, Precision.F64)
    feats = np.array([[6, 1, 2], [8, 2, 2]])
    pair = enc(MolGraph(feats, np.zeros((2, 0)), np.zeros((0, 1))),
               Conformer([[0.0, 0, 0], [cfg.cutoff + 1.0, 0, 0]])).data
    for i in range(2):
        alone = enc(MolGraph(feats[i:i + 1], np.zeros((2, 0)), np.zeros((0, 1))), Conformer([[0.0, 0, 0]])).data
        np.testing.assert_allclose(pair[i], alone[0], atol=1e-12)


@pytest.mark.parametrize("precision,tol", [(Precision.F64, 1e-10), (Precision.F32, 1e-5)])
def test_rigid_motion_invariance(precision, tol, cfg, rng):
    enc = ConformerEncoder(cfg, rng, precision)
    graph, conf = molecule(rng)
    base = enc(graph, conf).data
    for _ in range(10):
        R = random_rotation(rng)
        if rng.uniform() < 0.5:
            R = -R
        moved = conf.transformed(R, rng.normal(scale=5.0, size=3))
        np.testing.assert_allclose(enc(graph, moved).data, base, atol=tol)


def test_permutation_equivariance(cfg, rng):
    enc = ConformerEncoder(cfg, rng, Precision.F64)
    graph, conf = molecule(rng)
    base = enc(graph, conf).data
    order = rng.permutation(6)
    np.testing.assert_allclose(enc(graph.permute(order), conf.permute(order)).data, base[order], atol=1e-10)


def test_smooth_across_cutoff(cfg, rng):
    enc = ConformerEncoder(cfg, rng, Precision.F64)
    feats = np.array([[6, 1, 2], [8, 2, 2]])
    graph = MolGraph(feats, np.zeros((2, 0)), np.zeros((0, 1)))

    def f(s):
        return float(enc(graph, Conformer([[0.0, 0, 0], [s, 0, 0]])).data.sum())

    h, delta = 1e-6, 1e-4
    left = (f(cfg.cutoff - delta + h) - f(cfg.cutoff - delta - h)) / (2 * h)
    right = (f(cfg.cutoff + delta + h) - f(cfg.cutoff + delta - h)) / (2 * h)
    assert abs(left - right) < 1e-3


def test_batch_equals_individual(cfg, rng):
    enc = ConformerEncoder(cfg, rng, Precision.F32)
    mols = [molecule(rng, n=5), molecule(rng, n=3)]
    graphs = [g for g, _ in mols]
    confs = [[c, Conformer(c.coords + 0.3)] for _, c in mols]
    batched = enc.encode_batch(graphs, confs)
    for g, cs, out in zip(graphs, confs, batched):
        for c, h in zip(cs, out):
            np.testing.assert_allclose(h.data, enc(g, c).data, atol=1e-6)


def test_atom_count_mismatch(cfg, rng):
    enc = ConformerEncoder(cfg, rng, Precision.F32)
    graph, _ = molecule(rng, n=4)
    with pytest.raises(DataError):
        enc(graph, Conformer(np.zeros((3, 3))))
    with pytest.raises(DataError):
        Conformer([[0.0, np.nan, 0.0]])
