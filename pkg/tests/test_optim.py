import numpy as np
import pytest

from molmix.errors import DimensionError, TrainingError
from molmix.optim import AdamW, AdamWConfig, OptimState, adamw_step
from molmix.tensor import Parameter


def test_zero_gradient_without_decay_is_a_no_op():
    state = OptimState({"w": np.array([1.0, -2.0])})
    new = adamw_step(state, {"w": np.zeros(2)}, AdamWConfig(lr=0.1))
    np.testing.assert_array_equal(new.params["w"], [1.0, -2.0])
    assert new.step == 1
    np.testing.assert_array_equal(state.params["w"], [1.0, -2.0])


def test_decay_is_decoupled_from_gradient():
    new = adamw_step(OptimState({"w": np.array([2.0])}), {"w": np.zeros(1)}, AdamWConfig(lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(new.params["w"], [2.0 * (1 - 0.1 * 0.5)])


def test_first_step_moves_toward_minimum():
    w = np.array([1.0])
    new = adamw_step(OptimState({"w": w}), {"w": 2 * w}, AdamWConfig(lr=0.1))
    assert 0.0 < new.params["w"][0] < 1.0
    # bias-corrected first step has magnitude lr
    assert new.params["w"][0] == pytest.approx(0.9, abs=1e-6)


def test_converges_on_quadratic():
    state = OptimState({"w": np.array([1.0, -0.5])})
    cfg = AdamWConfig(lr=0.1)
    for _ in range(200):
        state = adamw_step(state, {"w": 2 * state.params["w"]}, cfg)
    assert float((state.params["w"] ** 2).sum()) < 1e-6


def test_missing_gradient_leaves_parameter_untouched():
    state = OptimState({"a": np.ones(2), "b": np.ones(2)})
    new = adamw_step(state, {"a": np.ones(2), "b": None}, AdamWConfig(lr=0.1, weight_decay=0.1))
    np.testing.assert_array_equal(new.params["b"], np.ones(2))
    assert new.params["a"][0] < 1.0


def test_non_finite_gradient_names_parameter():
    with pytest.raises(TrainingError, match="fusion.readout"):
        adamw_step(OptimState({"fusion.readout": np.ones(1)}), {"fusion.readout": np.array([np.nan])},
                   AdamWConfig())


def test_gradient_shape_mismatch():
    with pytest.raises(DimensionError):
        adamw_step(OptimState({"w": np.ones(2)}), {"w": np.ones(3)}, AdamWConfig())


def test_warmup_schedule():
    cfg = AdamWConfig(lr=1.0, warmup_steps=4)
    assert [cfg.lr_at(s) for s in (1, 2, 4, 10)] == [0.25, 0.5, 1.0, 1.0]


def test_stateful_optimizer_matches_functional_form(rng):
    w0 = rng.normal(size=(3, 2))
    p = Parameter(w0.copy())
    opt = AdamW([("w", p)], AdamWConfig(lr=0.05, weight_decay=0.01))
    state = OptimState({"w": w0.copy()})
    for _ in range(5):
        g = rng.normal(size=(3, 2))
        p.grad = g.copy()
        opt.step()
        state = adamw_step(state, {"w": g}, AdamWConfig(lr=0.05, weight_decay=0.01))
    np.testing.assert_allclose(p.data, state.params["w"], atol=1e-15)
    np.testing.assert_allclose(opt.state().exp_avg["w"], state.exp_avg["w"], atol=1e-15)


def test_frozen_parameter_is_skipped(rng):
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    opt = AdamW([("a", a), ("b", b)], AdamWConfig(lr=0.1, weight_decay=0.1))
    a.grad = np.ones(2)
    opt.step()
    np.testing.assert_array_equal(b.data, np.ones(2))
    assert a.data[0] < 1.0


def test_load_state_restores_moments():
    p = Parameter(np.ones(2))
    opt = AdamW([("w", p)], AdamWConfig(lr=0.1))
    p.grad = np.array([0.5, -0.5])
    opt.step()
    saved = opt.state()
    fresh = AdamW([("w", Parameter(np.ones(2)))], AdamWConfig(lr=0.1))
    fresh.load_state(saved)
    assert fresh.step_count == 1
    np.testing.assert_array_equal(fresh.exp_avg_sq["w"], saved.exp_avg_sq["w"])
