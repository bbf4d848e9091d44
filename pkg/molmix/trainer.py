"""
Training loop, evaluation and the experiment drivers.

- train(model, dataset, cfg): packed mini-batches under a token budget, AdamW,
  validation every eval_every steps, best-validation checkpoint, test report
- evaluate: de-normalised metrics on one split; packed batches are sharded
  over joblib threads and reduced with math.fsum
- run_seeds / ablate / transfer: multi-run protocols returning pandas tables
- TrainState: parameters + AdamW moments + step, saved in the tensor
  checkpoint container with a JSON sidecar (CheckpointInfo)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import roc_auc_score

from .config import ModalityMask, ModelConfig, Precision, RunConfig, TrainConfig, get_settings
from .data import Dataset, Molecule, split_deterministic
from .errors import CheckpointError, ConfigError
from .fusion import READOUT_FINAL, MolMix
from .optim import AdamW, AdamWConfig
from .schemas import CheckpointInfo, TrainReport
from .smiles_encoder import build_vocab
from .tensor import Tensor, abs_, as_tensor, bce_with_logits, load_arrays, mean, no_grad, save_arrays, square

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "best.ckpt"
METRICS_NAME = "metrics.csv"
REPORT_NAME = "report.json"
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
LOWER_IS_BETTER = {"mae": True, "rmse": True, "auc": False, "accuracy": False}


# -- state and checkpoints ---------------------------------------------------------------

@dataclass
class TrainState:
    params: Dict[str, np.ndarray]
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    best_step: int = 0
    checkpoint: Optional[Path] = None

    @classmethod
    def capture(cls, model: MolMix, opt: AdamW, best_step: int) -> "TrainState":
        return cls(model.state_dict(),
                   {n: a.copy() for n, a in opt.exp_avg.items()},
                   {n: a.copy() for n, a in opt.exp_avg_sq.items()},
                   opt.step_count, best_step)

    def save(self, path: Union[str, Path], precision: Precision) -> Path:
        arrays: Dict[str, np.ndarray] = {}
        for name, arr in self.params.items():
            arrays[f"param/{name}"] = arr
        for name, arr in self.exp_avg.items():
            arrays[f"adam_m/{name}"] = arr
        for name, arr in self.exp_avg_sq.items():
            arrays[f"adam_v/{name}"] = arr
        arrays["state/step"] = np.array([self.step])
        arrays["state/best_step"] = np.array([self.best_step])
        save_arrays(path, arrays, precision)
        self.checkpoint = Path(path)
        return self.checkpoint

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainState":
        arrays, _ = load_arrays(path)
        groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}, "state": {}}
        for key, arr in arrays.items():
            kind, _, name = key.partition("/")
            if kind not in groups or not name:
                raise CheckpointError(f"{path}: unexpected entry {key!r}")
            groups[kind][name] = arr
        if not groups["param"]:
            raise CheckpointError(f"{path}: no parameters")
        state = groups["state"]
        return cls(groups["param"], groups["adam_m"], groups["adam_v"],
                   int(state.get("step", np.zeros(1))[0]), int(state.get("best_step", np.zeros(1))[0]), Path(path))


def info_path(checkpoint: Union[str, Path]) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(checkpoint.name + ".json")


def read_checkpoint_info(checkpoint: Union[str, Path]) -> CheckpointInfo:
    path = info_path(checkpoint)
    try:
        return CheckpointInfo.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint sidecar {path}: {e}") from e
    except ValueError as e:
        raise CheckpointError(f"invalid checkpoint sidecar {path}: {e}") from e


def load_model(checkpoint: Union[str, Path]) -> Tuple[MolMix, CheckpointInfo, TrainState]:
    info = read_checkpoint_info(checkpoint)
    state = TrainState.load(checkpoint)
    model = MolMix(info.config.model, info.config.train.precision, seed=info.config.train.seed)
    model.load_state_dict(state.params)
    return model, info, state


def checkpoint_dataset(dataset: Dataset, info: CheckpointInfo) -> Dataset:
    """The dataset restricted to the checkpoint's targets, split and normalisation stats."""
    ds = dataset.select_targets(info.target_names)
    assignment = {mol_id: name for name in ("train", "val", "test") for mol_id in getattr(info.splits, name)}
    ds = ds.with_assignment(assignment)
    ds.mean, ds.std = np.array(info.mean), np.array(info.std)
    return ds


# -- data preparation --------------------------------------------------------------------

def prepare_dataset(dataset: Dataset, cfg: TrainConfig) -> Dataset:
    """Select the run's target column and attach a split if the dataset has none."""
    target = cfg.target or dataset.target_names[0]
    ds = dataset.select_targets([target])
    if not ds.assignment:
        ds = split_deterministic(ds, cfg.split_fractions, cfg.split_seed, normalize=cfg.task == "regression")
    return ds


def model_config_for(model_cfg: ModelConfig, dataset: Dataset) -> ModelConfig:
    """Fill the SMILES vocabulary from the data (if unset) and size the readout to the targets."""
    update = {"n_targets": len(dataset.target_names)}
    if not model_cfg.smiles_vocab:
        update["smiles_vocab"] = list(build_vocab(m.smiles for m in dataset.molecules).chars)
    return model_cfg.model_copy(update=update)


def make_batches(molecules: Sequence[Molecule], count_tokens: Callable[[Molecule], int], batch_size: int,
                 token_budget: int, rng: Optional[np.random.Generator] = None) -> List[List[Molecule]]:
    """Greedy packing in (optionally shuffled) order; a batch closes at batch_size molecules or
    when the next molecule would exceed the token budget."""
    order = np.arange(len(molecules)) if rng is None else rng.permutation(len(molecules))
    batches: List[List[Molecule]] = []
    current: List[Molecule] = []
    used = 0
    for i in order:
        mol = molecules[int(i)]
        n = count_tokens(mol)
        if current and (len(current) >= batch_size or used + n > token_budget):
            batches.append(current)
            current, used = [], 0
        current.append(mol)
        used += n
    if current:
        batches.append(current)
    return batches


# -- losses and metrics ------------------------------------------------------------------

def loss_value(pred: Tensor, y: np.ndarray, kind: str) -> Tensor:
    if kind == "bce":
        return bce_with_logits(pred, y)
    diff = pred - as_tensor(np.asarray(y).reshape(pred.shape), like=pred)
    if kind == "mae":
        return mean(abs_(diff))
    if kind == "mse":
        return mean(square(diff))
    raise ConfigError(f"unknown loss {kind!r}")


def regression_metrics(pred: np.ndarray, y: np.ndarray) -> Dict[str, float]:
    err = (np.asarray(pred, dtype=np.float64) - np.asarray(y, dtype=np.float64)).reshape(-1)
    n = err.size
    mae = math.fsum(np.abs(err).tolist()) / n
    rmse = math.sqrt(math.fsum((err * err).tolist()) / n)
    return {"mae": mae, "rmse": rmse}


def classification_metrics(logits: np.ndarray, y: np.ndarray) -> Dict[str, float]:
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    prob = 1.0 / (1.0 + np.exp(-z))
    accuracy = math.fsum(((prob >= 0.5) == (y >= 0.5)).astype(np.float64).tolist()) / y.size
    auc = float(roc_auc_score(y, prob)) if len(np.unique(y)) == 2 else float("nan")
    return {"auc": auc, "accuracy": accuracy}


def _better(metric: str, value: float, best: Optional[float]) -> bool:
    if best is None:
        return True
    if math.isnan(value):
        return False
    return value < best if LOWER_IS_BETTER[metric] else value > best


# -- evaluation --------------------------------------------------------------------------

def _forward_no_grad(model: MolMix, batch: Sequence[Molecule], mask: ModalityMask) -> np.ndarray:
    with no_grad():
        return model.forward_batch(batch, mask).data


def predict_molecules(model: MolMix, molecules: Sequence[Molecule], cfg: TrainConfig,
                      jobs: Optional[int] = None) -> np.ndarray:
    """Raw model outputs [N x targets] in input order; batching is fixed (unshuffled)."""
    mask = cfg.modalities
    batches = make_batches(molecules, lambda m: model.token_count(m, mask), cfg.batch_size, cfg.token_budget)
    jobs = jobs or get_settings().eval_jobs
    outs = Parallel(n_jobs=jobs, prefer="threads")(delayed(_forward_no_grad)(model, b, mask) for b in batches)
    return np.concatenate(outs).astype(np.float64)


def evaluate(model: MolMix, dataset: Dataset, split: str, cfg: TrainConfig,
             jobs: Optional[int] = None) -> Dict[str, float]:
    molecules = dataset.split(split)
    if not molecules:
        raise ConfigError(f"{split} split is empty")
    raw = predict_molecules(model, molecules, cfg, jobs)
    y = dataset.targets_of(molecules)
    if cfg.task == "classification":
        return classification_metrics(raw, y)
    return regression_metrics(dataset.denormalize(raw), y)


# -- training ----------------------------------------------------------------------------

@dataclass
class EvalPoint:
    step: int
    train_loss: float
    val: Dict[str, float]


@dataclass
class TrainResult:
    state: TrainState
    history: List[EvalPoint]
    report: TrainReport

    def history_frame(self) -> pd.DataFrame:
        rows = []
        for point in self.history:
            rows.append({"step": point.step, "split": "train", "metric": "loss", "value": point.train_loss})
            for name, value in point.val.items():
                rows.append({"step": point.step, "split": "val", "metric": name, "value": value})
        return pd.DataFrame(rows, columns=["step", "split", "metric", "value"])


def _selected(name: str, prefixes: Sequence[str]) -> bool:
    return any(name == p or name.startswith(p + ".") for p in prefixes)


def _train_stream(molecules: Sequence[Molecule], count: Callable[[Molecule], int], cfg: TrainConfig,
                  rng: np.random.Generator) -> Iterator[List[Molecule]]:
    while True:
        yield from make_batches(molecules, count, cfg.batch_size, cfg.token_budget, rng)


def train(model: MolMix, dataset: Dataset, cfg: TrainConfig, out_dir: Optional[Union[str, Path]] = None,
          trainable: Optional[Sequence[str]] = None, jobs: Optional[int] = None) -> TrainResult:
    """Optimise `model` on dataset's train split; `trainable` (name prefixes) freezes everything else.

    The returned model holds the best-validation parameters."""
    train_mols, val_mols = dataset.split("train"), dataset.split("val")
    if not train_mols or not val_mols:
        raise ConfigError(f"train and val splits must be non-empty (got {len(train_mols)} / {len(val_mols)})")
    mask = cfg.modalities
    named = model.named_parameters()
    if trainable is not None:
        if not any(_selected(name, trainable) for name, _ in named):
            raise ConfigError(f"no parameter matches trainable prefixes {list(trainable)}")
        for name, p in named:
            p.requires_grad = _selected(name, trainable)
    opt = AdamW([(n, p) for n, p in named if p.requires_grad],
                AdamWConfig(cfg.lr, tuple(cfg.betas), cfg.eps, cfg.weight_decay, cfg.warmup_steps))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    logger.info("Training %d parameters (%d trainable) on %d molecules, mask %s, %d steps",
                model.num_parameters(), sum(p.data.size for _, p in opt.params), len(train_mols),
                mask.label, cfg.max_steps)
    rng = np.random.default_rng(cfg.seed)
    stream = _train_stream(train_mols, lambda m: model.token_count(m, mask), cfg, rng)
    history: List[EvalPoint] = []
    best_val: Optional[float] = None
    best: Optional[TrainState] = None

    try:
        for step in range(1, cfg.max_steps + 1):
            batch = next(stream)
            opt.zero_grad()
            y = dataset.targets_of(batch)
            if cfg.task == "regression":
                y = dataset.normalize(y)
            loss = loss_value(model.forward_batch(batch, mask), y, cfg.loss)
            loss.backward()
            opt.step()
            if step % cfg.eval_every == 0:
                val = evaluate(model, dataset, "val", cfg, jobs)
                history.append(EvalPoint(step, loss.item(), val))
                logger.info("step %d loss %.6f val %s %.6f", step, loss.item(), cfg.metric, val[cfg.metric])
                if _better(cfg.metric, val[cfg.metric], best_val):
                    best_val = val[cfg.metric]
                    best = TrainState.capture(model, opt, step)
                    if out is not None:
                        _save_best(best, val, out, model, dataset, cfg)
        if best is None:
            val = evaluate(model, dataset, "val", cfg, jobs)
            best_val = val[cfg.metric]
            best = TrainState.capture(model, opt, cfg.max_steps)
            if out is not None:
                _save_best(best, val, out, model, dataset, cfg)
    finally:
        for _, p in named:
            p.requires_grad = True

    model.load_state_dict(best.params)
    test = evaluate(model, dataset, "test", cfg, jobs) if dataset.split("test") else {}
    report = TrainReport(
        seed=cfg.seed,
        modalities=mask.label,
        target=list(dataset.target_names),
        n_parameters=model.num_parameters(),
        steps=cfg.max_steps,
        best_step=best.best_step,
        best_val=best_val,
        val_metric=cfg.metric,
        test=test,
    )
    result = TrainResult(best, history, report)
    logger.info("Best %s %.6f at step %d; test %s", cfg.metric, best_val, best.best_step,
                ", ".join(f"{k}={v:.6f}" for k, v in test.items()))
    if out is not None:
        result.history_frame().to_csv(out / METRICS_NAME, index=False)
        (out / REPORT_NAME).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return result


def _save_best(state: TrainState, val: Dict[str, float], out: Path, model: MolMix, dataset: Dataset,
               cfg: TrainConfig) -> None:
    path = state.save(out / CHECKPOINT_NAME, model.precision)
    info = CheckpointInfo(
        config=RunConfig(model=model.cfg, train=cfg),
        step=state.best_step,
        metric=cfg.metric,
        value=val[cfg.metric],
        val=val,
        target_names=list(dataset.target_names),
        mean=[float(x) for x in (dataset.mean if dataset.mean is not None else np.zeros(len(dataset.target_names)))],
        std=[float(x) for x in (dataset.std if dataset.std is not None else np.ones(len(dataset.target_names)))],
        splits=dataset.split_file(),
    )
    info_path(path).write_text(info.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info("New best %s %.6f at step %d -> %s", cfg.metric, val[cfg.metric], state.best_step, path)


def evaluate_checkpoint(checkpoint: Union[str, Path], dataset: Dataset, split: str = "val",
                        jobs: Optional[int] = None) -> Tuple[Dict[str, float], CheckpointInfo]:
    model, info, _ = load_model(checkpoint)
    ds = checkpoint_dataset(dataset, info)
    return evaluate(model, ds, split, info.config.train, jobs), info


# -- experiment drivers ------------------------------------------------------------------

@dataclass
class ExperimentTable:
    """Per-run rows plus a per-key summary (mean, std, median over seeds)."""

    runs: pd.DataFrame
    summary: pd.DataFrame

    @classmethod
    def from_runs(cls, rows: List[dict], key: str) -> "ExperimentTable":
        runs = pd.DataFrame(rows)
        grouped = runs.groupby(key, sort=False)["value"]
        summary = grouped.agg(["mean", "std", "median", "count"]).fillna({"std": 0.0}).reset_index()
        return cls(runs, summary)

    def write(self, out_dir: Union[str, Path], stem: str) -> Tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        runs_path, summary_path = out / f"{stem}_runs.csv", out / f"{stem}.csv"
        self.runs.to_csv(runs_path, index=False)
        self.summary.to_csv(summary_path, index=False)
        return runs_path, summary_path


def _run_dir(out_dir: Optional[Union[str, Path]], *parts: str) -> Optional[Path]:
    return None if out_dir is None else Path(out_dir).joinpath(*parts)


def fit(model_cfg: ModelConfig, dataset: Dataset, cfg: TrainConfig, out_dir: Optional[Union[str, Path]] = None,
        jobs: Optional[int] = None) -> Tuple[MolMix, TrainResult]:
    """Build a fresh model for cfg.seed and train it."""
    model = MolMix(model_cfg, cfg.precision, seed=cfg.seed)
    return model, train(model, dataset, cfg, out_dir, jobs=jobs)


def _test_value(result: TrainResult, metric: str) -> float:
    return float(result.report.test.get(metric, float("nan")))


def run_seeds(model_cfg: ModelConfig, dataset: Dataset, cfg: TrainConfig, seeds: Sequence[int] = DEFAULT_SEEDS,
              out_dir: Optional[Union[str, Path]] = None, jobs: Optional[int] = None) -> ExperimentTable:
    rows = []
    for seed in seeds:
        run_cfg = cfg.model_copy(update={"seed": int(seed)})
        _, result = fit(model_cfg, dataset, run_cfg, _run_dir(out_dir, f"seed-{seed}"), jobs)
        rows.append({"mask": cfg.modalities.label, "seed": int(seed), "metric": cfg.metric,
                     "value": _test_value(result, cfg.metric)})
    return ExperimentTable.from_runs(rows, "mask")


def ablate(model_cfg: ModelConfig, dataset: Dataset, masks: Sequence[ModalityMask], cfg: TrainConfig,
           seeds: Optional[Sequence[int]] = None, out_dir: Optional[Union[str, Path]] = None,
           jobs: Optional[int] = None) -> ExperimentTable:
    """One independently seeded run per (mask, seed) with the same downstream config; keyed by mask label."""
    if not masks:
        raise ConfigError("ablation needs at least one modality mask")
    seeds = list(seeds) if seeds else [cfg.seed]
    rows = []
    for mask in masks:
        for seed in seeds:
            run_cfg = cfg.model_copy(update={"modalities": mask, "seed": int(seed)})
            _, result = fit(model_cfg, dataset, run_cfg, _run_dir(out_dir, mask.label, f"seed-{seed}"), jobs)
            value = _test_value(result, cfg.metric)
            rows.append({"mask": mask.label, "seed": int(seed), "metric": cfg.metric, "value": value})
            logger.info("Ablation %s seed %d: test %s %.6f", mask.label, seed, cfg.metric, value)
    return ExperimentTable.from_runs(rows, "mask")


def transfer(pretrained: TrainState, model_cfg: ModelConfig, dataset_b: Dataset, cfg: TrainConfig,
             seeds: Optional[Sequence[int]] = None, out_dir: Optional[Union[str, Path]] = None,
             jobs: Optional[int] = None) -> ExperimentTable:
    """Frozen-backbone transfer: freeze everything but the readout's final linear layer.

    The pretrained arm loads every parameter except that layer; the random arm
    keeps its fresh initialisation. Both arms share the seed, so the re-initialised
    readout layer starts identical."""
    readout_cfg = model_cfg.model_copy(update={"n_targets": len(dataset_b.target_names)})
    seeds = list(seeds) if seeds else [cfg.seed]
    rows = []
    for seed in seeds:
        run_cfg = cfg.model_copy(update={"seed": int(seed)})
        for init in ("pretrained", "random"):
            model = MolMix(readout_cfg, run_cfg.precision, seed=int(seed))
            if init == "pretrained":
                model.load_state_dict(pretrained.params, skip=[READOUT_FINAL])
            result = train(model, dataset_b, run_cfg, _run_dir(out_dir, init, f"seed-{seed}"),
                           trainable=[READOUT_FINAL], jobs=jobs)
            value = _test_value(result, cfg.metric)
            rows.append({"init": init, "seed": int(seed), "metric": cfg.metric, "value": value})
            logger.info("Transfer %s seed %d: test %s %.6f", init, seed, cfg.metric, value)
    return ExperimentTable.from_runs(rows, "init")
