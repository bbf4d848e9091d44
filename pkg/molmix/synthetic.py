"""
Synthetic molecules with controllable modality dependence.

- skeleton: random tree over C/N/O/S/F respecting valences, optional single
  ring closure (5 or 6 members), some double bonds
- SMILES: deterministic DFS writer over the generated graph (branches in
  parentheses, ring closure digit 1, '=' for double bonds)
- 3D: random layout relaxed with springs (bonded 1.5 A, non-bonded
  repulsion below 2.5 A), then per-conformer Gaussian noise and, optionally,
  an independent random rotation + translation
- targets: see molmix.features

One numpy Generator seeded from GenConfig.seed drives everything, so
(seed, config) fixes the output bytes.
"""

from __future__ import annotations

import logging
from collections import deque
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from .conf3d_encoder import Conformer
from .config import GenConfig
from .data import Dataset, Molecule
from .errors import ConfigError
from .features import compute_targets
from .graph2d_encoder import MolGraph

logger = logging.getLogger(__name__)

ELEMENTS = ("C", "N", "O", "S", "F")
ELEMENT_WEIGHTS = np.array([0.6, 0.12, 0.15, 0.05, 0.08])
ATOMIC_NUMBER = {"C": 6, "N": 7, "O": 8, "S": 16, "F": 9}
VALENCE = {"C": 4, "N": 3, "O": 2, "S": 2, "F": 1}
FORMAL_CHARGE_OFFSET = 2

BOND_LENGTH = 1.5
MIN_NONBONDED = 2.5
LAYOUT_STEPS = 400
LAYOUT_RATE = 0.02

Bond = Tuple[int, int, int]  # (u, v, order)


def _grow_tree(n: int, rng: np.random.Generator) -> Tuple[List[str], List[Bond], List[int]]:
    elements, free, bonds = ["C"], [VALENCE["C"]], []
    for i in range(1, n):
        p = ELEMENT_WEIGHTS.copy()
        if sum(free) < 2:
            p[ELEMENTS.index("F")] = 0.0
        el = ELEMENTS[int(rng.choice(len(ELEMENTS), p=p / p.sum()))]
        candidates = [j for j in range(i) if free[j] > 0]
        parent = candidates[int(rng.integers(len(candidates)))]
        bonds.append((parent, i, 1))
        free[parent] -= 1
        elements.append(el)
        free.append(VALENCE[el] - 1)
    return elements, bonds, free


def _hop_distances(n: int, bonds: Sequence[Bond]) -> np.ndarray:
    adj = [[] for _ in range(n)]
    for u, v, _ in bonds:
        adj[u].append(v)
        adj[v].append(u)
    dist = np.full((n, n), -1, dtype=np.int64)
    for s in range(n):
        dist[s, s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if dist[s, v] < 0:
                    dist[s, v] = dist[s, u] + 1
                    queue.append(v)
    return dist


def random_skeleton(n: int, rng: np.random.Generator, ring_probability: float,
                    double_bond_probability: float) -> Tuple[List[str], List[Bond], Optional[Tuple[int, int]]]:
    """Elements, bonds (tree bonds first, ring closure last) and the ring-closure pair if any."""
    elements, bonds, free = _grow_tree(n, rng)
    ring = None
    if n >= 5 and rng.random() < ring_probability:
        dist = _hop_distances(n, bonds)
        pairs = [(a, b) for a in range(n) for b in range(a + 1, n)
                 if free[a] > 0 and free[b] > 0 and dist[a, b] in (4, 5)]
        if pairs:
            ring = pairs[int(rng.integers(len(pairs)))]
            free[ring[0]] -= 1
            free[ring[1]] -= 1
    for i, (u, v, _) in enumerate(bonds):
        if free[u] > 0 and free[v] > 0 and rng.random() < double_bond_probability:
            bonds[i] = (u, v, 2)
            free[u] -= 1
            free[v] -= 1
    if ring is not None:
        bonds.append((ring[0], ring[1], 1))
    return elements, bonds, ring


def write_smiles(elements: Sequence[str], bonds: Sequence[Bond], ring: Optional[Tuple[int, int]] = None) -> str:
    """DFS from atom 0 over tree bonds; children in index order, the last one unbranched."""
    children: Dict[int, List[Tuple[int, int]]] = {i: [] for i in range(len(elements))}
    for u, v, order in bonds:
        if ring is not None and {u, v} == set(ring):
            continue
        children[u].append((v, order))
        children[v].append((u, order))
    for kids in children.values():
        kids.sort()
    out: List[str] = []

    # explicit stack: ("atom", u, parent) or ("text", s)
    stack: List[tuple] = [("atom", 0, -1)]
    while stack:
        item = stack.pop()
        if item[0] == "text":
            out.append(item[1])
            continue
        _, u, parent = item
        out.append(elements[u])
        if ring is not None and u in ring:
            out.append("1")
        kids = [(v, o) for v, o in children[u] if v != parent]
        todo: List[tuple] = []
        for idx, (v, order) in enumerate(kids):
            bond = "=" if order == 2 else ""
            if idx < len(kids) - 1:
                todo += [("text", "(" + bond), ("atom", v, u), ("text", ")")]
            else:
                todo += [("text", bond), ("atom", v, u)]
        stack.extend(reversed(todo))
    return "".join(out)


def relax_layout(n: int, bonds: Sequence[Bond], rng: np.random.Generator) -> np.ndarray:
    """Gradient descent on sum over bonded (d - 1.5)^2 + sum over close non-bonded (d - 2.5)^2."""
    x = rng.normal(size=(n, 3)) * max(1.0, n ** (1.0 / 3.0))
    bonded = np.zeros((n, n), dtype=bool)
    for u, v, _ in bonds:
        bonded[u, v] = bonded[v, u] = True
    off_diag = ~np.eye(n, dtype=bool)
    for _ in range(LAYOUT_STEPS):
        diff = x[:, None, :] - x[None, :, :]
        d = np.sqrt((diff * diff).sum(axis=-1)) + np.eye(n)
        coef = np.where(bonded, d - BOND_LENGTH, np.where(d < MIN_NONBONDED, d - MIN_NONBONDED, 0.0))
        coef = np.where(off_diag, coef, 0.0)
        grad = 2.0 * ((coef / d)[:, :, None] * diff).sum(axis=1)
        x = x - LAYOUT_RATE * grad
    return x - x.mean(axis=0)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform proper rotation from the QR decomposition of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def atom_features(elements: Sequence[str], bonds: Sequence[Bond]) -> np.ndarray:
    degree = np.zeros(len(elements), dtype=np.int64)
    for u, v, _ in bonds:
        degree[u] += 1
        degree[v] += 1
    return np.array([[ATOMIC_NUMBER[el], int(degree[i]), FORMAL_CHARGE_OFFSET]
                     for i, el in enumerate(elements)], dtype=np.int64)


def _molecule(index: int, cfg: GenConfig, rng: np.random.Generator) -> Molecule:
    n = int(rng.integers(cfg.atoms_min, cfg.atoms_max + 1))
    elements, bonds, ring = random_skeleton(n, rng, cfg.ring_probability, cfg.double_bond_probability)
    smiles = write_smiles(elements, bonds, ring)
    graph = MolGraph.from_bonds(atom_features(elements, bonds), [(u, v, order - 1) for u, v, order in bonds])
    base = relax_layout(n, bonds, rng)
    conformers = []
    for _ in range(cfg.k_conformers):
        coords = base + rng.normal(scale=cfg.noise_sigma, size=base.shape) if cfg.noise_sigma > 0 else base.copy()
        if cfg.random_pose:
            coords = coords @ random_rotation(rng).T + rng.normal(scale=2.0, size=3)
        conformers.append(Conformer(coords))
    first = conformers[0].coords if conformers else base
    values = compute_targets(graph, smiles, first, cfg.targets, cfg.mix_weights, cfg.marked_char)
    return Molecule(f"syn-{index:05d}", smiles, graph, conformers, np.array([values[k] for k in cfg.targets]))


def gen_synthetic(cfg: Optional[GenConfig] = None, **overrides) -> Dataset:
    """Generate cfg.count molecules; keyword overrides are validated like config fields."""
    cfg = cfg or GenConfig()
    if overrides:
        try:
            cfg = GenConfig.model_validate({**cfg.model_dump(), **overrides})
        except ValidationError as e:
            raise ConfigError(f"invalid generator config: {e}") from e
    if len(set(cfg.targets)) != len(cfg.targets):
        raise ConfigError(f"duplicate target kinds in {cfg.targets}")
    rng = np.random.default_rng(cfg.seed)
    molecules = [_molecule(i, cfg, rng) for i in range(cfg.count)]
    logger.info("Generated %d synthetic molecules (%d-%d atoms, k=%d, targets=%s)",
                cfg.count, cfg.atoms_min, cfg.atoms_max, cfg.k_conformers, ",".join(cfg.targets))
    return Dataset(molecules, list(cfg.targets))
