"""
AdamW with decoupled weight decay and bias-corrected moments.

Constant learning rate after an optional linear warmup. Parameters whose
gradient is None (frozen, or unused by the current modality mask) are left
untouched, weight decay included.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, TrainingError
from .tensor import Parameter


@dataclass
class AdamWConfig:
    lr: float = 5e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 0

    def lr_at(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.lr * step / self.warmup_steps
        return self.lr


@dataclass
class OptimState:
    params: Dict[str, np.ndarray]
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                 cfg: AdamWConfig) -> None:
    """In-place update of p, m, v for one tensor at (1-based) step."""
    b1, b2 = cfg.betas
    lr = cfg.lr_at(step)
    if cfg.weight_decay:
        p *= 1.0 - lr * cfg.weight_decay
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    p -= (lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype, copy=False)


def _check_finite(grads: Dict[str, Optional[np.ndarray]]) -> None:
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")


def adamw_step(state: OptimState, grads: Dict[str, Optional[np.ndarray]], cfg: AdamWConfig) -> OptimState:
    """Functional form: returns a new state, the input is not modified."""
    _check_finite(grads)
    step = state.step + 1
    params, m_all, v_all = {}, {}, {}
    for name, p in state.params.items():
        p = p.copy()
        m = state.exp_avg.get(name, np.zeros_like(p)).copy()
        v = state.exp_avg_sq.get(name, np.zeros_like(p)).copy()
        g = grads.get(name)
        if g is not None:
            if g.shape != p.shape:
                raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            adamw_update(p, g, m, v, step, cfg)
        params[name], m_all[name], v_all[name] = p, m, v
    return OptimState(params, m_all, v_all, step)


class AdamW:
    """Stateful optimizer over named Parameters, sharing adamw_update with adamw_step."""

    def __init__(self, named_params: Sequence[Tuple[str, Parameter]], cfg: AdamWConfig):
        self.params: List[Tuple[str, Parameter]] = list(named_params)
        self.cfg = cfg
        self.exp_avg = {name: np.zeros_like(p.data) for name, p in self.params}
        self.exp_avg_sq = {name: np.zeros_like(p.data) for name, p in self.params}
        self.step_count = 0

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        _check_finite({name: p.grad for name, p in self.params})
        self.step_count += 1
        for name, p in self.params:
            if p.grad is None or not p.requires_grad:
                continue
            adamw_update(p.data, p.grad, self.exp_avg[name], self.exp_avg_sq[name], self.step_count, self.cfg)

    def state(self) -> OptimState:
        return OptimState({n: p.data.copy() for n, p in self.params},
                          {n: a.copy() for n, a in self.exp_avg.items()},
                          {n: a.copy() for n, a in self.exp_avg_sq.items()},
                          self.step_count)

    def load_state(self, state: OptimState) -> None:
        for name, p in self.params:
            if name in state.exp_avg:
                self.exp_avg[name] = state.exp_avg[name].reshape(p.shape).astype(p.dtype, copy=True)
                self.exp_avg_sq[name] = state.exp_avg_sq[name].reshape(p.shape).astype(p.dtype, copy=True)
        self.step_count = state.step
