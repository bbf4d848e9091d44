import numpy as np
import pytest

from molmix.cli import gradcheck_setup
from molmix.config import Precision
from molmix.errors import ConfigError
from molmix.gradcheck import GradcheckReport, GroupResult, check_gradients, group_of, relative_error
from molmix.layers import Linear, Module
from molmix.tensor import Tensor, mean, square


class Quadratic(Module):
    def __init__(self, rng):
        self.proj = Linear(3, 2, rng, Precision.F64)


def test_group_names():
    assert group_of("fusion.readout.layers.1.weight") == "fusion.readout"
    assert group_of("graph2d.layers.0.eps") == "graph2d.layers"
    assert group_of("scale") == "scale"


def test_relative_error_floor():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-6)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_model_without_parameters_passes():
    report = check_gradients(Module(), lambda: Tensor(np.zeros(())))
    assert report.passed
    assert report.lines() == [report.lines()[0], "PASS"]


def test_linear_model_passes(rng):
    model = Quadratic(rng)
    x = Tensor(rng.normal(size=(5, 3)))
    y = rng.normal(size=(5, 2))
    report = check_gradients(model, lambda: mean(square(model.proj(x) - Tensor(y))), per_tensor=6)
    assert report.passed
    assert {g.group for g in report.groups} == {"proj.weight", "proj.bias"}
    assert sum(g.checked for g in report.groups) == 8


def test_report_lines_list_failures():
    report = GradcheckReport([GroupResult("a.b", 1e-6, 3), GroupResult("c.d", 0.5, 3, "c.d.weight")])
    lines = report.lines()
    assert not report.passed
    assert report.failed_groups == ["c.d"]
    assert "FAIL (c.d.weight)" in lines[2]
    assert lines[-1] == "FAIL: c.d"


@pytest.mark.parametrize("attention", ["tiled", "naive"])
def test_full_model_gradients_match_finite_differences(attention):
    model, loss_fn = gradcheck_setup(5, seed=0, attention=attention)
    report = check_gradients(model, loss_fn, per_tensor=2)
    assert report.passed, "\n".join(report.lines())
    groups = {g.group for g in report.groups}
    assert {"smiles.embedding", "fusion.readout"} <= groups
    assert any(g.startswith("graph2d.") for g in groups)
    assert any(g.startswith("conf3d.") for g in groups)


def test_corrupted_gradient_is_caught():
    model, loss_fn = gradcheck_setup(4, seed=1)

    def corrupt(grads):
        return {n: (g + 1.0 if n.startswith("fusion.readout.") else g) for n, g in grads.items()}

    report = check_gradients(model, loss_fn, per_tensor=2, grad_hook=corrupt)
    assert "fusion.readout" in report.failed_groups
    assert report.lines()[-1].startswith("FAIL")


def test_setup_rejects_large_molecules():
    with pytest.raises(ConfigError):
        gradcheck_setup(9, seed=0)
