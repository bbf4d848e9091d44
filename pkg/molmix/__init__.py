"""MolMix: SMILES, bond-graph and conformer encoders fused by one transformer over a joint token sequence."""

from .config import GenConfig, ModalityMask, ModelConfig, Precision, RunConfig, TrainConfig
from .data import Dataset, Molecule, load_jsonl, split_deterministic, write_jsonl
from .fusion import MolMix, build_sequence, forward, predict
from .synthetic import gen_synthetic
from .trainer import ablate, evaluate, train, transfer

__all__ = [
    "GenConfig", "ModalityMask", "ModelConfig", "Precision", "RunConfig", "TrainConfig",
    "Dataset", "Molecule", "load_jsonl", "split_deterministic", "write_jsonl",
    "MolMix", "build_sequence", "forward", "predict", "gen_synthetic",
    "ablate", "evaluate", "train", "transfer",
]
