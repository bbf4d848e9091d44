"""
Synthetic target descriptors.

Each descriptor is recoverable from exactly one modality:
- geom: mean pairwise distance of the first conformer (3D)
- topo: Wiener index / number of atom pairs (2D)
- str: fraction of SMILES characters equal to a marked character (1D)
- mix: weighted sum of the three
"""

from collections import deque
from typing import Dict, Optional, Sequence

import numpy as np

from .graph2d_encoder import MolGraph

EPS = 1e-12
TARGET_KINDS = ("geom", "topo", "str", "mix")


def _safe_div(a: float, b: float) -> float:
    return float(a) / float(b) if abs(float(b)) > EPS else 0.0


def mean_pairwise_distance(coords: np.ndarray) -> float:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    n = coords.shape[0]
    if n < 2:
        return 0.0
    iu, ju = np.triu_indices(n, k=1)
    diff = coords[iu] - coords[ju]
    return float(np.sqrt((diff * diff).sum(axis=1)).mean())


def shortest_paths(graph: MolGraph) -> np.ndarray:
    """Hop distances by BFS from every atom; -1 where unreachable."""
    n = graph.n_atoms
    adj = [[] for _ in range(n)]
    for u, v in graph.edge_index.T:
        adj[int(u)].append(int(v))
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


def wiener_index(graph: MolGraph) -> int:
    """Sum of shortest-path lengths over unordered reachable atom pairs."""
    dist = shortest_paths(graph)
    iu, ju = np.triu_indices(graph.n_atoms, k=1)
    d = dist[iu, ju]
    return int(d[d > 0].sum())


def normalized_wiener(graph: MolGraph) -> float:
    n = graph.n_atoms
    return _safe_div(wiener_index(graph), n * (n - 1) / 2)


def char_fraction(smiles: str, char: str) -> float:
    return _safe_div(smiles.count(char), len(smiles))


def compute_targets(graph: MolGraph, smiles: str, coords: Optional[np.ndarray], kinds: Sequence[str],
                    weights: Sequence[float] = (1.0, 1.0, 1.0), marked_char: str = "O") -> Dict[str, float]:
    """Descriptor values for the requested kinds, in the requested order."""
    geom = mean_pairwise_distance(coords) if coords is not None else 0.0
    topo = normalized_wiener(graph)
    text = char_fraction(smiles, marked_char)
    values = {
        "geom": geom,
        "topo": topo,
        "str": text,
        "mix": weights[0] * geom + weights[1] * topo + weights[2] * text,
    }
    return {k: float(values[k]) for k in kinds}
