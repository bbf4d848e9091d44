"""
Molecule data model, JSONL ingestion and deterministic splits.

- Molecule: id, SMILES, bond graph, k conformers (k may be 0), target vector
- Dataset: molecules + target names + train/val/test assignment + train-split z-score stats
- load_jsonl / write_jsonl: one record per line, bonds listed once (the loader mirrors them)
- split_deterministic: seeded permutation, then contiguous train/val/test partition

Bond types in records are 1 single, 2 double, 3 triple, 4 aromatic; the graph
stores type - 1 as its categorical bond column.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from .conf3d_encoder import Conformer
from .errors import ConfigError, DataError
from .graph2d_encoder import MolGraph
from .schemas import DatasetMeta, MoleculeRecord, SplitFile

logger = logging.getLogger(__name__)

BOND_TYPES = {1: "single", 2: "double", 3: "triple", 4: "aromatic"}
SPLITS = ("train", "val", "test")


@dataclass
class Molecule:
    id: str
    smiles: str
    graph: MolGraph
    conformers: List[Conformer] = field(default_factory=list)
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not self.smiles:
            raise DataError(f"molecule {self.id}: empty SMILES")
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        for c, conf in enumerate(self.conformers):
            if conf.n_atoms != self.graph.n_atoms:
                raise DataError(f"molecule {self.id}: conformer {c} has {conf.n_atoms} atoms, "
                                f"graph has {self.graph.n_atoms}")

    @property
    def n_atoms(self) -> int:
        return self.graph.n_atoms

    @classmethod
    def from_record(cls, rec: MoleculeRecord) -> "Molecule":
        n = len(rec.atoms)
        bonds = []
        pairs = set()
        for u, v, kind in rec.bonds:
            if kind not in BOND_TYPES:
                raise DataError(f"molecule {rec.id}: unknown bond type {kind} on ({u}, {v})")
            if not (0 <= u < n and 0 <= v < n):
                raise DataError(f"molecule {rec.id}: bond ({u}, {v}) outside 0..{n - 1}")
            pair = (min(u, v), max(u, v))
            if pair in pairs:
                raise DataError(f"molecule {rec.id}: bond {pair} listed more than once")
            pairs.add(pair)
            bonds.append((u, v, kind - 1))
        widths = {len(a) for a in rec.atoms}
        if len(widths) != 1:
            raise DataError(f"molecule {rec.id}: atoms have differing feature counts {sorted(widths)}")
        try:
            graph = MolGraph.from_bonds(np.array(rec.atoms, dtype=np.int64), bonds)
            conformers = [Conformer(np.array(c, dtype=np.float64).reshape(-1, 3)) for c in rec.conformers]
        except DataError as e:
            raise DataError(f"molecule {rec.id}: {e}") from e
        return cls(rec.id, rec.smiles, graph, conformers, np.array(rec.targets, dtype=np.float64))

    def to_record(self) -> MoleculeRecord:
        seen = set()
        bonds = []
        src, dst = self.graph.edge_index
        for e in range(self.graph.n_edges):
            u, v = int(src[e]), int(dst[e])
            key = (min(u, v), max(u, v))
            if key in seen:
                continue
            seen.add(key)
            bonds.append([u, v, int(self.graph.edge_features[e, 0]) + 1])
        return MoleculeRecord(
            id=self.id,
            smiles=self.smiles,
            atoms=self.graph.atom_features.tolist(),
            bonds=bonds,
            conformers=[c.coords.tolist() for c in self.conformers],
            targets=[float(t) for t in self.targets],
        )


@dataclass
class Dataset:
    molecules: List[Molecule]
    target_names: List[str]
    assignment: Dict[str, str] = field(default_factory=dict)
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        ids = [m.id for m in self.molecules]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise DataError(f"duplicate molecule id {dup}")
        for m in self.molecules:
            if m.targets.size != len(self.target_names):
                raise DataError(f"molecule {m.id}: {m.targets.size} targets, dataset names {len(self.target_names)}")

    def __len__(self) -> int:
        return len(self.molecules)

    def by_id(self, mol_id: str) -> Molecule:
        for m in self.molecules:
            if m.id == mol_id:
                return m
        raise DataError(f"no molecule with id {mol_id}")

    def split(self, name: str) -> List[Molecule]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [m for m in self.molecules if self.assignment.get(m.id) == name]

    def with_assignment(self, assignment: Dict[str, str], normalize: bool = True) -> "Dataset":
        """Attach a split assignment; stats come from the train split only."""
        ids = {m.id for m in self.molecules}
        missing = ids - set(assignment)
        if missing:
            raise ConfigError(f"{len(missing)} molecules have no split, e.g. {sorted(missing)[0]}")
        bad = {s for s in assignment.values() if s not in SPLITS}
        if bad:
            raise ConfigError(f"unknown split names {sorted(bad)}")
        assignment = {k: v for k, v in assignment.items() if k in ids}
        n_targets = len(self.target_names)
        mean, std = np.zeros(n_targets), np.ones(n_targets)
        train = [m.targets for m in self.molecules if assignment[m.id] == "train"]
        if normalize and train:
            y = np.stack(train)
            mean = y.mean(axis=0)
            std = y.std(axis=0)
            std = np.where(std > 0, std, 1.0)
        return replace(self, assignment=assignment, mean=mean, std=std)

    def select_targets(self, names: Sequence[str]) -> "Dataset":
        unknown = [n for n in names if n not in self.target_names]
        if unknown:
            raise ConfigError(f"unknown target {unknown[0]!r}; dataset has {self.target_names}")
        cols = [self.target_names.index(n) for n in names]
        mols = [replace(m, targets=m.targets[cols]) for m in self.molecules]
        return Dataset(mols, list(names), dict(self.assignment),
                       None if self.mean is None else self.mean[cols],
                       None if self.std is None else self.std[cols])

    def targets_of(self, molecules: Sequence[Molecule]) -> np.ndarray:
        return np.stack([m.targets for m in molecules]).reshape(len(molecules), len(self.target_names))

    def normalize(self, y: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return y
        return (y - self.mean) / self.std

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return y
        return y * self.std + self.mean

    def split_file(self) -> SplitFile:
        return SplitFile(**{s: [m.id for m in self.split(s)] for s in SPLITS})


# -- files -------------------------------------------------------------------------------

def meta_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def content_sha1(path: Union[str, Path]) -> str:
    """Git blob hash of the file content."""
    data = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def _dump_line(rec: MoleculeRecord) -> str:
    return json.dumps(rec.model_dump(), separators=(",", ":"))


def write_jsonl(ds: Dataset, path: Union[str, Path], generator: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for m in ds.molecules:
            fh.write(_dump_line(m.to_record()) + "\n")
    meta = DatasetMeta(target_names=list(ds.target_names), count=len(ds), generator=generator)
    meta_path(path).write_text(meta.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info("Wrote %d molecules to %s", len(ds), path)
    return path


def _read_meta(path: Path) -> Optional[DatasetMeta]:
    mp = meta_path(path)
    if not mp.exists():
        return None
    try:
        return DatasetMeta.model_validate_json(mp.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise DataError(f"invalid dataset sidecar {mp}: {e}") from e


def load_jsonl(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    molecules: List[Molecule] = []
    problems: List[str] = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = MoleculeRecord.model_validate_json(raw.decode("utf-8"))
                molecules.append(Molecule.from_record(rec))
            except UnicodeDecodeError:
                problems.append(f"line {lineno}: invalid UTF-8")
            except ValidationError as e:
                problems.append(f"line {lineno}: {e.errors()[0]['msg']}")
            except DataError as e:
                problems.append(f"line {lineno}: {e}")
    if problems:
        for p in problems:
            logger.warning("Rejected %s: %s", path, p)
        raise DataError(f"{path}: {len(problems)} malformed records; {problems[0]}")
    if not molecules:
        raise DataError(f"{path}: empty dataset")

    meta = _read_meta(path)
    n_targets = molecules[0].targets.size
    names = list(meta.target_names) if meta else [f"t{i}" for i in range(n_targets)]
    logger.info("Loaded %d molecules (%d targets) from %s", len(molecules), len(names), path)
    return Dataset(molecules, names)


# -- splits ------------------------------------------------------------------------------

def split_sizes(n: int, fractions: Tuple[float, float, float]) -> Tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_train = min(n, int(round(fractions[0] * n)))
    n_val = min(n - n_train, int(round(fractions[1] * n)))
    return n_train, n_val, n - n_train - n_val


def split_deterministic(ds: Dataset, fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
                        seed: int = 0, normalize: bool = True) -> Dataset:
    n_train, n_val, _ = split_sizes(len(ds), tuple(fractions))
    order = np.random.default_rng(seed).permutation(len(ds))
    assignment = {}
    for rank, i in enumerate(order):
        name = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        assignment[ds.molecules[int(i)].id] = name
    return ds.with_assignment(assignment, normalize=normalize)


def write_splits(ds: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(ds.split_file().model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def read_splits(ds: Dataset, path: Union[str, Path], normalize: bool = True) -> Dataset:
    try:
        sf = SplitFile.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValidationError) as e:
        raise ConfigError(f"cannot read split file {path}: {e}") from e
    assignment: Dict[str, str] = {}
    for name in SPLITS:
        for mol_id in getattr(sf, name):
            if mol_id in assignment:
                raise ConfigError(f"molecule {mol_id} appears in both {assignment[mol_id]} and {name}")
            assignment[mol_id] = name
    return ds.with_assignment(assignment, normalize=normalize)

