"""
Configuration layer.

- Settings: process-level knobs read from MOLMIX_* environment variables / .env
- ModelConfig: architecture hyperparameters (defaults follow the 128 / 512 setup)
- TrainConfig: optimisation, loss/metric, modality mask, seed, precision
- GenConfig: synthetic molecule generator
- RunConfig: the JSON document accepted by `--config` (model + train)

The cutoff / RBF values are SchNet conventions at desk scale, not values
taken from a published run.
"""

from __future__ import annotations

from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="MOLMIX_", env_file=".env", extra="ignore")

    seed: int = 0
    log_level: str = "INFO"
    eval_jobs: int = Field(1, ge=1)
    out_dir: Path = Path("runs")


@lru_cache
def get_settings() -> Settings:
    return Settings()


class Precision(str, Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.F32 else np.dtype(np.float64)

    @classmethod
    def of(cls, dtype) -> "Precision":
        return cls.F32 if np.dtype(dtype) == np.float32 else cls.F64


MODALITIES = ("1d", "2d", "3d")


class ModalityMask(BaseModel):
    """Which modalities reach the downstream transformer. Labels follow the
    ablation row names: '1d', '2d+3d', '1d+2d+3d', ..."""

    model_config = ConfigDict(frozen=True)

    use_1d: bool = True
    use_2d: bool = True
    use_3d: bool = True

    @model_validator(mode="after")
    def _at_least_one(self) -> "ModalityMask":
        if not (self.use_1d or self.use_2d or self.use_3d):
            raise ValueError("at least one modality must be enabled")
        return self

    @classmethod
    def parse(cls, label: str) -> "ModalityMask":
        parts = [p.strip().lower() for p in label.split("+") if p.strip()]
        unknown = [p for p in parts if p not in MODALITIES]
        if unknown or not parts:
            raise ConfigError(f"bad modality label {label!r}; expected '+'-joined subset of {MODALITIES}")
        try:
            return cls(use_1d="1d" in parts, use_2d="2d" in parts, use_3d="3d" in parts)
        except ValidationError as e:
            raise ConfigError(str(e)) from e

    @property
    def label(self) -> str:
        flags = (self.use_1d, self.use_2d, self.use_3d)
        return "+".join(m for m, on in zip(MODALITIES, flags) if on)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d_enc: int = Field(128, ge=1)
    d_model: int = Field(512, ge=1)

    # 1D
    smiles_vocab: List[str] = Field(default_factory=list)
    smiles_layers: int = Field(2, ge=1)
    smiles_heads: int = Field(4, ge=1)

    # 2D
    gine_layers: int = Field(6, ge=1)
    atom_feature_names: List[str] = Field(default_factory=lambda: ["atomic_number", "degree", "formal_charge"])
    atom_feature_sizes: List[int] = Field(default_factory=lambda: [119, 8, 5])
    num_bond_types: int = Field(4, ge=1)

    # 3D
    schnet_blocks: int = Field(3, ge=1)
    rbf_count: int = Field(50, ge=2)
    cutoff: float = Field(5.0, gt=0)
    rbf_gamma: float = Field(10.0, gt=0)

    # downstream
    fusion_layers: int = Field(6, ge=1)
    fusion_heads: int = Field(8, ge=1)
    ffn_mult: int = Field(2, ge=1)
    attention: Literal["tiled", "naive"] = "tiled"
    block_size: int = Field(32, ge=1)
    layer_norm_eps: float = Field(1e-5, gt=0)
    n_targets: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if self.d_enc % self.smiles_heads:
            raise ValueError(f"d_enc={self.d_enc} not divisible by smiles_heads={self.smiles_heads}")
        if self.d_model % self.fusion_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by fusion_heads={self.fusion_heads}")
        if len(self.atom_feature_names) != len(self.atom_feature_sizes):
            raise ValueError("atom_feature_names and atom_feature_sizes differ in length")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(5e-4, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    warmup_steps: int = Field(0, ge=0)
    batch_size: int = Field(32, ge=1)
    token_budget: int = Field(4096, ge=1)
    max_steps: int = Field(3000, ge=1)
    eval_every: int = Field(100, ge=1)
    task: Literal["regression", "classification"] = "regression"
    loss: Literal["mae", "mse", "bce"] = "mae"
    metric: Literal["mae", "rmse", "auc", "accuracy"] = "mae"
    target: Optional[str] = None
    modalities: ModalityMask = Field(default_factory=ModalityMask)
    seed: int = 0
    precision: Precision = Precision.F32
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0

    @field_validator("modalities", mode="before")
    @classmethod
    def _parse_mask(cls, v):
        if isinstance(v, str):
            return ModalityMask.parse(v)
        return v

    @field_validator("split_fractions")
    @classmethod
    def _fractions_sum_to_one(cls, v):
        if any(f < 0 for f in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {v}")
        return v

    @model_validator(mode="after")
    def _task_consistency(self) -> "TrainConfig":
        if self.task == "classification":
            if self.loss != "bce" or self.metric not in ("auc", "accuracy"):
                raise ValueError("classification runs need loss='bce' and metric in {'auc', 'accuracy'}")
        elif self.loss == "bce" or self.metric in ("auc", "accuracy"):
            raise ValueError("regression runs need loss in {'mae', 'mse'} and metric in {'mae', 'rmse'}")
        return self


TargetKind = Literal["geom", "topo", "str", "mix"]


class GenConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    count: int = Field(100, ge=1)
    atoms_min: int = Field(5, ge=1)
    atoms_max: int = Field(30, ge=1)
    k_conformers: int = Field(4, ge=0)
    targets: List[TargetKind] = Field(default_factory=lambda: ["mix"])
    mix_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    marked_char: str = Field("O", min_length=1, max_length=1)
    noise_sigma: float = Field(0.1, ge=0)
    ring_probability: float = Field(0.3, ge=0, le=1)
    double_bond_probability: float = Field(0.15, ge=0, le=1)
    random_pose: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _range(self) -> "GenConfig":
        if self.atoms_min > self.atoms_max:
            raise ValueError(f"atoms_min={self.atoms_min} > atoms_max={self.atoms_max}")
        if not self.targets:
            raise ValueError("at least one target kind is required")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)


def load_run_config(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.model_validate_json(Path(path).read_text())
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
