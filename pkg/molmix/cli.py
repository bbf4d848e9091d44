"""
Command-line entry point: `python -m molmix <command> [flags]`.

Commands: gen | train | eval | ablate | transfer | gradcheck | attnbench | attndump.
Every command writes only below --out. Flags override values from --config;
MOLMIX_SEED supplies the seed when neither sets it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from .attention import PackedBatch, attn_scores_dump, measure_stats
from .config import GenConfig, ModalityMask, ModelConfig, Precision, RunConfig, get_settings, load_run_config
from .data import content_sha1, load_jsonl, write_jsonl, write_splits
from .errors import ConfigError, DataError, MolMixError
from .fusion import MolMix, pack_sequences
from .gradcheck import DEFAULT_STEP, DEFAULT_TOLERANCE, check_gradients
from .schemas import GenManifest, RunManifest
from .synthetic import gen_synthetic
from .tensor import Tensor, no_grad
from .trainer import (DEFAULT_SEEDS, TrainState, ablate, evaluate_checkpoint, fit, load_model, loss_value,
                      model_config_for, prepare_dataset, read_checkpoint_info, run_seeds, transfer)

logger = logging.getLogger(__name__)

DATASET_NAME = "molecules.jsonl"
MANIFEST_NAME = "manifest.json"
ABLATION_MASKS = ["1d", "2d", "3d", "1d+2d", "1d+3d", "2d+3d", "1d+2d+3d"]
GRADCHECK_MAX_ATOMS = 8

# flag dest -> config field
MODEL_FLAGS = {
    "d_enc": "d_enc", "d_model": "d_model", "smiles_layers": "smiles_layers", "smiles_heads": "smiles_heads",
    "gine_layers": "gine_layers", "schnet_blocks": "schnet_blocks", "rbf_count": "rbf_count",
    "cutoff": "cutoff", "fusion_layers": "fusion_layers", "fusion_heads": "fusion_heads",
    "attention": "attention", "block_size": "block_size",
}
TRAIN_FLAGS = {
    "lr": "lr", "weight_decay": "weight_decay", "warmup_steps": "warmup_steps", "batch_size": "batch_size",
    "token_budget": "token_budget", "max_steps": "max_steps", "eval_every": "eval_every", "task": "task",
    "loss": "loss", "metric": "metric", "target": "target", "modalities": "modalities", "seed": "seed",
    "precision": "precision", "split_seed": "split_seed",
}


def _mask_label(text: str) -> str:
    return text.replace(",", "+")


def _configure_logging(level: Optional[str]) -> None:
    logging.basicConfig(
        level=(level or get_settings().log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else get_settings().out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args) -> int:
    return args.seed if args.seed is not None else get_settings().seed


# -- config resolution -------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    cfg = load_run_config(Path(args.config) if getattr(args, "config", None) else None)
    model = cfg.model.model_dump()
    train = cfg.train.model_dump()
    train["modalities"] = cfg.train.modalities.label
    for dest, key in MODEL_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            model[key] = value
    for dest, key in TRAIN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            train[key] = _mask_label(value) if dest == "modalities" else value
    if getattr(args, "seed", None) is None and "seed" not in cfg.train.model_fields_set:
        train["seed"] = get_settings().seed
    try:
        return RunConfig.model_validate({"model": model, "train": train})
    except ValidationError as e:
        raise ConfigError(f"invalid run configuration: {e}") from e


def _read_manifest(path: Path) -> RunManifest:
    try:
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except (OSError, ValidationError) as e:
        raise ConfigError(f"cannot read run manifest {path}: {e}") from e


def _write_manifest(out: Path, manifest) -> Path:
    path = out / MANIFEST_NAME
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def _find_dataset(checkpoint: Path, data: Optional[str]) -> Path:
    """--data if given, else the dataset named by the run manifest above the checkpoint."""
    if data:
        return Path(data)
    for folder in list(checkpoint.resolve().parents)[:3]:
        mp = folder / MANIFEST_NAME
        if mp.exists():
            return Path(_read_manifest(mp).dataset)
    raise ConfigError(f"no --data given and no {MANIFEST_NAME} found above {checkpoint}")


# -- commands ----------------------------------------------------------------------------

def cmd_gen(args) -> int:
    out = _out_dir(args)
    fields = {
        "count": args.count, "atoms_min": args.atoms_min, "atoms_max": args.atoms_max,
        "k_conformers": args.k_conformers, "noise_sigma": args.noise_sigma,
        "ring_probability": args.ring_probability, "double_bond_probability": args.double_bond_probability,
        "marked_char": args.marked_char, "mix_weights": args.mix_weights,
        "targets": [t.strip() for t in args.target.split(",") if t.strip()] if args.target else None,
        "random_pose": False if args.no_random_pose else None,
        "seed": _seed(args),
    }
    try:
        cfg = GenConfig.model_validate({k: v for k, v in fields.items() if v is not None})
    except ValidationError as e:
        raise ConfigError(f"invalid generator configuration: {e}") from e
    ds = gen_synthetic(cfg)
    path = write_jsonl(ds, out / DATASET_NAME, generator=cfg.model_dump(mode="json"))
    _write_manifest(out, GenManifest(config=cfg, dataset=str(path), dataset_sha1=content_sha1(path)))
    print(path)
    return 0


def _train_from(cfg: RunConfig, data: Path, seeds: List[int], out: Path, jobs: Optional[int],
                expected_sha1: Optional[str] = None) -> int:
    sha1 = content_sha1(data)
    if expected_sha1 is not None and sha1 != expected_sha1:
        raise DataError(f"{data} changed since the manifest was written ({sha1} != {expected_sha1})")
    ds = prepare_dataset(load_jsonl(data), cfg.train)
    train_cfg = cfg.train.model_copy(update={"target": ds.target_names[0], "seed": seeds[0]})
    resolved = RunConfig(model=model_config_for(cfg.model, ds), train=train_cfg)
    _write_manifest(out, RunManifest(command="train", config=resolved, dataset=str(data), dataset_sha1=sha1,
                                     seeds=seeds, out_dir=str(out)))
    write_splits(ds, out / "splits.json")
    if len(seeds) == 1:
        _, result = fit(resolved.model, ds, resolved.train, out, jobs)
        print(json.dumps(result.report.test))
        return 0
    table = run_seeds(resolved.model, ds, resolved.train, seeds, out, jobs)
    table.write(out, "seeds")
    print(table.summary.to_string(index=False))
    return 0


def cmd_train(args) -> int:
    if args.manifest:
        manifest = _read_manifest(Path(args.manifest))
        out = Path(args.out) if args.out else Path(manifest.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return _train_from(manifest.config, Path(manifest.dataset), list(manifest.seeds), out, args.jobs,
                           expected_sha1=manifest.dataset_sha1)
    if not args.data:
        raise ConfigError("train needs --data or --manifest")
    cfg = _run_config(args)
    seeds = list(args.seeds) if args.seeds else [cfg.train.seed]
    return _train_from(cfg, Path(args.data), seeds, _out_dir(args), args.jobs)


def cmd_eval(args) -> int:
    out = _out_dir(args)
    checkpoint = Path(args.checkpoint)
    ds = load_jsonl(_find_dataset(checkpoint, args.data))
    metrics, info = evaluate_checkpoint(checkpoint, ds, args.split, args.jobs)
    report = {"checkpoint": str(checkpoint), "split": args.split, "metrics": metrics}
    if args.split == "val":
        report["stored"] = info.val
        report["reproduced"] = metrics == info.val
    (out / "eval.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(report))
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    cfg = _run_config(args)
    masks = [ModalityMask.parse(_mask_label(m)) for m in (args.masks or ABLATION_MASKS)]
    data = Path(args.data)
    ds = prepare_dataset(load_jsonl(data), cfg.train)
    model_cfg = model_config_for(cfg.model, ds)
    seeds = list(args.seeds) if args.seeds else [cfg.train.seed]
    resolved = RunConfig(model=model_cfg, train=cfg.train.model_copy(update={"target": ds.target_names[0]}))
    _write_manifest(out, RunManifest(command="ablate", config=resolved, dataset=str(data),
                                     dataset_sha1=content_sha1(data), seeds=seeds, out_dir=str(out),
                                     extra={"masks": [m.label for m in masks]}))
    table = ablate(model_cfg, ds, masks, resolved.train, seeds, out, args.jobs)
    table.write(out, "ablation")
    print(table.summary.to_string(index=False))
    return 0


def cmd_transfer(args) -> int:
    out = _out_dir(args)
    checkpoint = Path(args.pretrained)
    info = read_checkpoint_info(checkpoint)
    pretrained = TrainState.load(checkpoint)
    cfg = _run_config(args)
    data = Path(args.data)
    ds = prepare_dataset(load_jsonl(data), cfg.train)
    seeds = list(args.seeds) if args.seeds else list(DEFAULT_SEEDS)
    resolved = RunConfig(model=info.config.model, train=cfg.train.model_copy(update={"target": ds.target_names[0]}))
    _write_manifest(out, RunManifest(command="transfer", config=resolved, dataset=str(data),
                                     dataset_sha1=content_sha1(data), seeds=seeds, out_dir=str(out),
                                     extra={"pretrained": str(checkpoint)}))
    table = transfer(pretrained, info.config.model, ds, resolved.train, seeds, out, args.jobs)
    table.write(out, "transfer")
    print(table.summary.to_string(index=False))
    return 0


def gradcheck_setup(atoms: int, seed: int, attention: str = "tiled", k_conformers: int = 2):
    """A minimal F64 model and one synthetic molecule for finite-difference checks."""
    if not 1 <= atoms <= GRADCHECK_MAX_ATOMS:
        raise ConfigError(f"gradcheck runs on at most {GRADCHECK_MAX_ATOMS} atoms, got {atoms}")
    ds = gen_synthetic(GenConfig(count=1, atoms_min=atoms, atoms_max=atoms, k_conformers=k_conformers, seed=seed))
    mol = ds.molecules[0]
    model_cfg = ModelConfig(d_enc=16, d_model=32, smiles_layers=1, smiles_heads=2, gine_layers=2,
                            schnet_blocks=2, rbf_count=8, fusion_layers=2, fusion_heads=2, attention=attention,
                            block_size=4, smiles_vocab=sorted(set(mol.smiles)), n_targets=1)
    model = MolMix(model_cfg, Precision.F64, seed=seed)
    mask = ModalityMask()

    def loss_fn() -> Tensor:
        return loss_value(model.forward_batch([mol], mask), mol.targets.reshape(1, -1), "mse")

    return model, loss_fn


def cmd_gradcheck(args) -> int:
    out = _out_dir(args)
    seed = _seed(args)
    model, loss_fn = gradcheck_setup(args.atoms, seed, args.attention)
    report = check_gradients(model, loss_fn, h=args.h, per_tensor=args.per_tensor, seed=seed, tol=args.tol)
    lines = report.lines()
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0 if report.passed else 1


def attnbench_table(lengths: Sequence[int], batch_sizes: Sequence[int], heads: int, dim: int, block: int,
                    seed: int = 0) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    rows = []
    for impl in ("naive", "tiled"):
        for b in batch_sizes:
            for length in lengths:
                x = Tensor(rng.normal(size=(b * length, dim)), precision=Precision.F32)
                packed = PackedBatch(x, [i * length for i in range(b + 1)])
                stats = measure_stats(impl, packed, heads, block, seed=seed)
                rows.append({"impl": impl, "batch_size": b, "length": length, "heads": heads, "block": block,
                             "peak_scratch_elements": stats.peak_scratch_elements,
                             "flops_estimate": stats.flops_estimate})
    return pd.DataFrame(rows)


def cmd_attnbench(args) -> int:
    out = _out_dir(args)
    table = attnbench_table(args.lengths, args.batch_sizes, args.heads, args.dim, args.block,
                            _seed(args))
    table.to_csv(out / "attnbench.csv", index=False)
    print(table.to_string(index=False))
    return 0


def cmd_attndump(args) -> int:
    out = _out_dir(args)
    checkpoint = Path(args.checkpoint)
    model, info, _ = load_model(checkpoint)
    mol = load_jsonl(_find_dataset(checkpoint, args.data)).by_id(args.molecule_id)
    with no_grad():
        packed = pack_sequences(model.encode([mol], info.config.train.modalities))
    encoder = model.fusion.transformer
    written = []
    for layer in range(len(encoder.blocks)):
        for head in range(encoder.blocks[layer].attn.heads):
            dump = attn_scores_dump(encoder, packed, layer, head)
            path = out / f"layer{layer}_head{head}.txt"
            dump.write(path)
            written.append(path)
    logger.info("Wrote %d score matrices to %s", len(written), out)
    print(len(written))
    return 0


# -- parser ------------------------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config ({model: ..., train: ...})")
    p.add_argument("--modalities", help="e.g. 1d,2d,3d or 2d+3d")
    p.add_argument("--target", help="target column (default: first)")
    p.add_argument("--task", choices=["regression", "classification"])
    p.add_argument("--loss", choices=["mae", "mse", "bce"])
    p.add_argument("--metric", choices=["mae", "rmse", "auc", "accuracy"])
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--token-budget", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--precision", choices=[p_.value for p_ in Precision])
    p.add_argument("--split-seed", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--jobs", type=int, help="evaluation threads (default MOLMIX_EVAL_JOBS)")
    for flag in ("d-enc", "d-model", "smiles-layers", "smiles-heads", "gine-layers", "schnet-blocks",
                 "rbf-count", "fusion-layers", "fusion-heads", "block-size"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--cutoff", type=float)
    p.add_argument("--attention", choices=["tiled", "naive"])


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default MOLMIX_OUT_DIR)")
    common.add_argument("--seed", type=int, help="default MOLMIX_SEED")
    common.add_argument("--log-level", help="default MOLMIX_LOG_LEVEL")

    parser = argparse.ArgumentParser(prog="molmix", description="Multimodal (SMILES + graph + conformer) "
                                                                 "molecular property models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--atoms-min", type=int)
    p.add_argument("--atoms-max", type=int)
    p.add_argument("--k-conformers", type=int)
    p.add_argument("--target", help="comma list of geom,topo,str,mix")
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--ring-probability", type=float)
    p.add_argument("--double-bond-probability", type=float)
    p.add_argument("--mix-weights", type=float, nargs=3)
    p.add_argument("--marked-char")
    p.add_argument("--no-random-pose", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train one run (or one per --seeds)")
    p.add_argument("--data")
    p.add_argument("--manifest", help="replay a run from its manifest.json")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="one run per modality mask")
    p.add_argument("--data", required=True)
    p.add_argument("--masks", nargs="+", help=f"default: {' '.join(ABLATION_MASKS)}")
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("transfer", parents=[common], help="frozen-backbone readout training vs random init")
    p.add_argument("--pretrained", required=True, help="best.ckpt of the pretraining run")
    p.add_argument("--data", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    p.add_argument("--atoms", type=int, default=5)
    p.add_argument("--h", type=float, default=DEFAULT_STEP)
    p.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--per-tensor", type=int, default=3)
    p.add_argument("--attention", choices=["tiled", "naive"], default="tiled")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("attnbench", parents=[common], help="attention scratch memory: naive vs tiled")
    p.add_argument("--lengths", type=int, nargs="+", default=[64, 128, 256, 512])
    p.add_argument("--batch-sizes", type=int, nargs="+", default=[1])
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--block", type=int, default=32)
    p.set_defaults(func=cmd_attnbench)

    p = sub.add_parser("attndump", parents=[common], help="per-head pre-softmax scores of one molecule")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--molecule-id", required=True)
    p.set_defaults(func=cmd_attndump)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.log_level)
    try:
        return args.func(args)
    except MolMixError as e:
        logger.error("%s: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
