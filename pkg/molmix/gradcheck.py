"""
Finite-difference verification of reverse-mode gradients.

For a few sampled elements of every parameter, the analytic gradient is
compared against the central difference (L(w + h) - L(w - h)) / 2h with
rel = |a - n| / max(|a|, |n|, floor). Results are grouped by the first two
components of the parameter name (e.g. `graph2d.layers`, `fusion.readout`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from .layers import Module
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-4
DEFAULT_TOLERANCE = 1e-3
REL_FLOOR = 1e-3

GradHook = Callable[[Dict[str, np.ndarray]], Dict[str, np.ndarray]]


@dataclass
class GroupResult:
    group: str
    worst_rel_error: float
    checked: int
    worst_param: str = ""

    def passed(self, tol: float = DEFAULT_TOLERANCE) -> bool:
        return self.worst_rel_error < tol


@dataclass
class GradcheckReport:
    groups: List[GroupResult]
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def passed(self) -> bool:
        return all(g.passed(self.tolerance) for g in self.groups)

    @property
    def failed_groups(self) -> List[str]:
        return [g.group for g in self.groups if not g.passed(self.tolerance)]

    def lines(self) -> List[str]:
        out = [f"{'group':<28} {'checked':>7} {'worst rel err':>14}  status"]
        for g in self.groups:
            status = "ok" if g.passed(self.tolerance) else f"FAIL ({g.worst_param})"
            out.append(f"{g.group:<28} {g.checked:>7} {g.worst_rel_error:>14.3e}  {status}")
        out.append("PASS" if self.passed else f"FAIL: {', '.join(self.failed_groups)}")
        return out


def group_of(name: str) -> str:
    return ".".join(name.split(".")[:2])


def relative_error(a: float, n: float, floor: float = REL_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(model: Module, loss_fn: Callable[[], Tensor], h: float = DEFAULT_STEP,
                    per_tensor: int = 3, seed: int = 0, tol: float = DEFAULT_TOLERANCE,
                    grad_hook: Optional[GradHook] = None) -> GradcheckReport:
    """`loss_fn` recomputes a scalar loss from the model's current parameters.

    `grad_hook` may rewrite the analytic gradients before comparison."""
    named = model.named_parameters()
    if not named:
        return GradcheckReport([], tol)
    model.zero_grad()
    loss_fn().backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in named}
    if grad_hook is not None:
        analytic = grad_hook(analytic)

    rng = np.random.default_rng(seed)
    worst: Dict[str, GroupResult] = {}
    for name, p in named:
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        g = analytic[name].reshape(-1)
        for i in picks:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
            flat[i] = orig
            rel = relative_error(float(g[i]), (up - down) / (2.0 * h))
            key = group_of(name)
            res = worst.setdefault(key, GroupResult(key, 0.0, 0))
            res.checked += 1
            if rel > res.worst_rel_error:
                res.worst_rel_error, res.worst_param = rel, name
    report = GradcheckReport(list(worst.values()), tol)
    for g in report.groups:
        logger.debug("gradcheck %s: %d elements, worst %.3e", g.group, g.checked, g.worst_rel_error)
    return report
