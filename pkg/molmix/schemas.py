"""On-disk document schemas: molecule records, split files, dataset sidecars, run manifests and reports."""

from __future__ import annotations

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .config import GenConfig, RunConfig


# ---- MOLECULE RECORD (one JSONL line) ----
class MoleculeRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    smiles: str = Field(min_length=1)
    atoms: List[List[int]] = Field(min_length=1)
    bonds: List[List[int]] = Field(default_factory=list)
    conformers: List[List[List[float]]] = Field(default_factory=list)
    targets: List[float] = Field(default_factory=list)

    @field_validator("bonds")
    @classmethod
    def _bond_triples(cls, v):
        for i, b in enumerate(v):
            if len(b) != 3:
                raise ValueError(f"bond {i} must be [u, v, type], got {b}")
        return v

    @field_validator("conformers")
    @classmethod
    def _xyz(cls, v):
        for c, conf in enumerate(v):
            for a, xyz in enumerate(conf):
                if len(xyz) != 3:
                    raise ValueError(f"conformer {c} atom {a} has {len(xyz)} coordinates")
        return v


# ---- SPLITS ----
class SplitFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train: List[str] = Field(default_factory=list)
    val: List[str] = Field(default_factory=list)
    test: List[str] = Field(default_factory=list)


# ---- DATASET SIDECAR ----
class DatasetMeta(BaseModel):
    target_names: List[str]
    count: int
    generator: Optional[Dict[str, Any]] = None


class GenManifest(BaseModel):
    config: GenConfig
    dataset: str
    dataset_sha1: str


# ---- RUNS ----
class RunManifest(BaseModel):
    """Everything needed to re-execute a run."""

    command: str
    config: RunConfig
    dataset: str
    dataset_sha1: str
    seeds: List[int]
    out_dir: str
    extra: Dict[str, Any] = Field(default_factory=dict)


class CheckpointInfo(BaseModel):
    """Sidecar of a best-validation checkpoint: enough to rebuild the model and its val split."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    config: RunConfig
    step: int
    metric: str
    value: float
    val: Dict[str, float]
    target_names: List[str]
    mean: List[float]
    std: List[float]
    splits: SplitFile


class TrainReport(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    seed: int
    modalities: str
    target: List[str]
    n_parameters: int
    steps: int
    best_step: int
    best_val: float
    val_metric: str
    test: Dict[str, float]
