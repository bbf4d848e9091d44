import numpy as np
import pytest

from molmix.config import GenConfig
from molmix.data import load_jsonl, write_jsonl
from molmix.errors import ConfigError
from molmix.features import (
    char_fraction,
    compute_targets,
    mean_pairwise_distance,
    normalized_wiener,
    shortest_paths,
    wiener_index,
)
from molmix.graph2d_encoder import MolGraph
from molmix.synthetic import VALENCE, gen_synthetic, random_rotation, random_skeleton, write_smiles


def path_graph(n):
    return MolGraph.from_bonds(np.tile([[6, 1, 2]], (n, 1)), [(i, i + 1, 0) for i in range(n - 1)])


# ---- descriptors ----
def test_geom_of_two_atoms():
    assert mean_pairwise_distance(np.array([[0.0, 0, 0], [1.5, 0, 0]])) == pytest.approx(1.5)
    assert mean_pairwise_distance(np.zeros((1, 3))) == 0.0


def test_wiener_index_of_path():
    g = path_graph(3)
    assert wiener_index(g) == 4
    assert normalized_wiener(g) == pytest.approx(4 / 3)
    assert shortest_paths(g)[0, 2] == 2


def test_char_fraction():
    assert char_fraction("CCO", "O") == pytest.approx(1 / 3)
    assert char_fraction("CCC", "O") == 0.0


def test_mix_is_weighted_sum():
    g = path_graph(3)
    coords = np.array([[0.0, 0, 0], [1.5, 0, 0], [3.0, 0, 0]])
    t = compute_targets(g, "CCO", coords, ["geom", "topo", "str", "mix"], (1.0, 2.0, 3.0))
    assert list(t) == ["geom", "topo", "str", "mix"]
    assert t["geom"] == pytest.approx(2.0)
    assert t["mix"] == pytest.approx(t["geom"] + 2 * t["topo"] + 3 * t["str"])


def test_geom_invariant_under_rigid_motion(rng):
    coords = rng.normal(size=(8, 3))
    moved = coords @ random_rotation(rng).T + rng.normal(size=3)
    assert mean_pairwise_distance(moved) == pytest.approx(mean_pairwise_distance(coords), abs=1e-12)


# ---- generator ----
def test_random_rotation_is_proper(rng):
    for _ in range(10):
        R = random_rotation(rng)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)


def test_write_smiles_branches_and_ring():
    elements = ["C", "C", "O", "N", "C", "C"]
    bonds = [(0, 1, 1), (1, 2, 2), (1, 3, 1), (3, 4, 1), (4, 5, 1), (5, 0, 1)]
    assert write_smiles(elements, bonds[:4]) == "CC(=O)NC"
    assert write_smiles(elements, bonds, ring=(0, 5)) == "C1C(=O)NCC1"


def test_skeleton_respects_valence(rng):
    for _ in range(50):
        n = int(rng.integers(1, 25))
        elements, bonds, ring = random_skeleton(n, rng, 0.5, 0.3)
        used = np.zeros(n, dtype=int)
        for u, v, order in bonds:
            used[u] += order
            used[v] += order
        assert all(used[i] <= VALENCE[el] for i, el in enumerate(elements))
        assert len(bonds) == n - 1 + (ring is not None)


def test_generated_smiles_are_well_formed():
    ds = gen_synthetic(count=60, atoms_min=1, atoms_max=20, ring_probability=0.8, seed=4)
    for m in ds.molecules:
        assert sum(c.isalpha() for c in m.smiles) == m.n_atoms
        assert m.smiles.count("(") == m.smiles.count(")")
        assert m.smiles.count("1") in (0, 2)


def test_generation_is_byte_reproducible(tmp_path):
    a = write_jsonl(gen_synthetic(count=10, seed=9), tmp_path / "a.jsonl")
    b = write_jsonl(gen_synthetic(count=10, seed=9), tmp_path / "b.jsonl")
    c = write_jsonl(gen_synthetic(count=10, seed=10), tmp_path / "c.jsonl")
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_generated_molecules_pass_load_validation(tmp_path):
    ds = gen_synthetic(GenConfig(count=30, atoms_min=2, atoms_max=15, k_conformers=3,
                                 targets=["geom", "topo", "str", "mix"]))
    back = load_jsonl(write_jsonl(ds, tmp_path / "d.jsonl"))
    assert back.target_names == ["geom", "topo", "str", "mix"]
    assert all(len(m.conformers) == 3 for m in back.molecules)
    assert all(2 <= m.n_atoms <= 15 for m in back.molecules)


def test_targets_follow_their_modality():
    ds = gen_synthetic(count=5, k_conformers=2, targets=["geom", "topo", "str"], seed=0)
    for m in ds.molecules:
        geom, topo, text = m.targets
        assert geom == pytest.approx(mean_pairwise_distance(m.conformers[0].coords))
        assert topo == pytest.approx(normalized_wiener(m.graph))
        assert text == pytest.approx(char_fraction(m.smiles, "O"))


def test_no_conformers_uses_base_layout():
    ds = gen_synthetic(count=3, k_conformers=0, targets=["geom"], seed=0)
    assert all(m.conformers == [] and m.targets[0] > 0 for m in ds.molecules)


def test_generator_config_errors():
    with pytest.raises(ConfigError):
        gen_synthetic(count=2, targets=["mix", "mix"])
    with pytest.raises(ConfigError):
        gen_synthetic(count=2, atoms_min=10, atoms_max=5)
