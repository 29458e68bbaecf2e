import json

import numpy as np
import pytest

import genlora.training as training
from genlora.config import AdapterConfig, TrainConfig
from genlora.errors import NumericalError, ParameterError, SchemaError
from genlora.gradcheck import central_difference, relative_error
from genlora.numerics import svd
from genlora.training import (OptimizerState, adamw_step, build_model, cross_entropy_loss, lr_at,
                              make_synthetic_task, mse_loss, numerical_rank, task_from_config, train)


def small_config(**overrides) -> TrainConfig:
    base = dict(dim_out=16, dim_in=16, n_samples=64, batch_size=16, total_steps=30, warmup_steps=5,
                teacher_groups=2, adapter=AdapterConfig(rank=4, groups=2, centers=15), log_every=10)
    base.update(overrides)
    return TrainConfig(**base)


# --- schedule -----------------------------------------------------------------------


def closed_form_lr(step, warm, total, base):
    if step < warm:
        return base * step / warm
    return base * max(0.0, (total - step) / (total - warm)) if total > warm else base


def test_schedule_landmarks():
    cfg = TrainConfig(lr=0.1, warmup_steps=10, total_steps=110)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(10, cfg) == pytest.approx(0.1)
    assert lr_at(110, cfg) == 0.0
    mid = (10 + 110) // 2
    assert lr_at(mid, cfg) == pytest.approx(closed_form_lr(mid, 10, 110, 0.1)) == pytest.approx(0.05)
    for step in range(0, 111, 7):
        assert lr_at(step, cfg) == pytest.approx(closed_form_lr(step, 10, 110, 0.1), abs=1e-15)


def test_schedule_out_of_range():
    cfg = TrainConfig(warmup_steps=2, total_steps=5)
    with pytest.raises(ParameterError):
        lr_at(6, cfg)
    with pytest.raises(ParameterError):
        lr_at(-1, cfg)


def test_config_validation():
    with pytest.raises(SchemaError):
        TrainConfig(warmup_steps=10, total_steps=5)
    with pytest.raises(SchemaError):
        TrainConfig(layers=2, dim_out=8, dim_in=16)
    with pytest.raises(SchemaError):
        TrainConfig(freeze=("a",))
    with pytest.raises(SchemaError):
        TrainConfig.from_dict({"adapter": {"rank": 4, "colour": "red"}})
    cfg = TrainConfig.from_dict({"adapter": {"rank": 4, "grid": [-2, 2]}, "freeze": ["z_a"]})
    assert cfg.adapter.grid == (-2.0, 2.0) and cfg.freeze == ("z_a",)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# --- optimiser ----------------------------------------------------------------------


def test_adamw_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, OptimizerState(), 0.1)
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adamw_hand_stepped_scalar():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = {"w": np.array([0.5])}
    opt = OptimizerState((b1, b2), eps)
    adamw_step(p, {"w": np.array([1.0])}, opt, lr)
    assert p["w"][0] == pytest.approx(0.5 - lr * 1.0 / (1.0 + eps), abs=1e-12)
    # second step with g = -0.5, worked by hand
    m = b1 * 0.1 + (1 - b1) * -0.5
    v = b2 * 0.001 + (1 - b2) * 0.25
    expected = p["w"][0] - lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)
    adamw_step(p, {"w": np.array([-0.5])}, opt, lr)
    assert p["w"][0] == pytest.approx(expected, abs=1e-12)


def test_adamw_decoupled_weight_decay_and_freeze():
    p = {"w": np.array([2.0]), "f": np.array([3.0])}
    opt = OptimizerState(weight_decay=0.1)
    adamw_step(p, {"w": np.zeros(1), "f": np.ones(1)}, opt, 0.5, frozen={"f"})
    assert p["w"][0] == pytest.approx(2.0 * (1 - 0.05))
    assert p["f"][0] == 3.0 and "f" not in opt.exp_avg


# --- losses -------------------------------------------------------------------------


def test_loss_gradients():
    rng = np.random.default_rng(0)
    h, y = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    _, g = mse_loss(h, y)
    assert relative_error(g, central_difference(lambda: mse_loss(h, y)[0], h)) < 1e-6
    labels = np.array([0, 2, 1, 1, 0])
    loss, g = cross_entropy_loss(h, labels)
    assert relative_error(g, central_difference(lambda: cross_entropy_loss(h, labels)[0], h)) < 1e-6
    p = np.exp(h - h.max(0)) / np.exp(h - h.max(0)).sum(0)
    assert loss == pytest.approx(-np.mean(np.log(p[labels, np.arange(5)])), rel=1e-13)


# --- synthetic task -----------------------------------------------------------------


@pytest.mark.parametrize("teacher", ["genlora", "gaussian"])
def test_teacher_has_exact_rank(teacher):
    task = make_synthetic_task("teacher-student", 64, 64, teacher_rank=4, seed=3, teacher=teacher)
    s = svd(task.teacher_deltas[0]).singular_values
    assert np.count_nonzero(s > 1e-10 * s[0]) == 4


def test_task_determinism_and_zero_teacher():
    a = make_synthetic_task("teacher-student", 8, 8, teacher_rank=2, n_samples=10, seed=5)
    b = make_synthetic_task("teacher-student", 8, 8, teacher_rank=2, n_samples=10, seed=5)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    zero = make_synthetic_task("teacher-student", 8, 8, teacher_rank=0, n_samples=10)
    assert not zero.teacher_deltas[0].any()
    assert np.allclose(zero.y, zero.base_weights[0] @ zero.x, rtol=1e-14, atol=1e-14)


def test_zero_teacher_is_solved_at_init():
    cfg = small_config(teacher_rank=0, total_steps=0, warmup_steps=0)
    report = train(cfg)
    assert report.initial_loss < 1e-25


# --- training loop ------------------------------------------------------------------


def test_zero_steps_keeps_parameters():
    cfg = small_config(total_steps=0, warmup_steps=0)
    report = train(cfg)
    assert report.final_loss == report.initial_loss and report.losses == []
    fresh = build_model(cfg, task_from_config(cfg))
    for name, arr in fresh.params().items():
        assert np.array_equal(arr, report.model.params()[name])


def test_training_is_deterministic():
    a = json.dumps(train(small_config()).to_dict(), sort_keys=True)
    b = json.dumps(train(small_config()).to_dict(), sort_keys=True)
    assert a == b


def test_training_reduces_loss_and_respects_rank():
    report = train(small_config(total_steps=80))
    assert report.final_loss < 0.5 * report.initial_loss
    for cp in report.rank_checkpoints:
        assert all(r <= 4 for r in cp["ranks"].values())
    assert report.rank_checkpoints[0]["ranks"]["layer0"] == 0


def test_disable_norm_changes_the_run():
    on = train(small_config(total_steps=20))
    off = train(small_config(total_steps=20, disable_norm=True))
    assert off.model.adapters[0].normalize is False
    assert on.losses[0] == off.losses[0]  # zero update at step 0 either way
    assert on.losses != off.losses


@pytest.mark.parametrize("freeze", [("z_a", "z_b"), ("theta_a",), ("z_b",), ("z_a", "theta_a")])
def test_frozen_blocks_bit_identical_after_100_steps(freeze):
    cfg = small_config(total_steps=100, freeze=freeze)
    task = task_from_config(cfg)
    before = {k: v.copy() for k, v in build_model(cfg, task).params().items()}
    report = train(cfg, task)
    after = report.model.params()
    frozen = report.model.frozen_blocks()
    assert frozen
    for name in frozen:
        assert np.array_equal(before[name], after[name]), name
    moved = [n for n in after if n not in frozen and not np.array_equal(before[n], after[n])]
    assert moved


def test_lora_training_runs():
    cfg = small_config(adapter=AdapterConfig(kind="lora", rank=4), total_steps=60, lr=1e-2)
    report = train(cfg)
    assert report.final_loss < report.initial_loss


def test_stacked_layers_gradients_match_finite_differences():
    cfg = small_config(dim_out=8, dim_in=8, layers=2, adapter=AdapterConfig(rank=2, groups=2, centers=3))
    task = make_synthetic_task(cfg.task, 8, 8, layers=2, n_samples=5, teacher="gaussian")
    model = build_model(cfg, task)
    rng = np.random.default_rng(0)
    for arr in model.params().values():
        arr[...] = rng.uniform(-1, 1, arr.shape)

    def loss():
        return mse_loss(model.forward(task.x)[0], task.y)[0]

    h, tapes = model.forward(task.x)
    grads = model.backward(tapes, mse_loss(h, task.y)[1])
    for name, arr in model.params().items():
        assert relative_error(grads[name], central_difference(loss, arr)) < 1e-6, name


def test_classification_task_trains():
    cfg = small_config(task="tiny-classification", total_steps=60, teacher_scale=2.0)
    report = train(cfg)
    assert report.final_loss < report.initial_loss


def test_dropout_is_reproducible():
    cfg = small_config(adapter=AdapterConfig(rank=4, groups=2, centers=5, dropout=0.1), total_steps=15)
    assert train(cfg).losses == train(cfg).losses


def test_non_finite_loss_names_the_step(monkeypatch):
    real = training.mse_loss
    calls = {"n": 0}

    def flaky(h, y):
        calls["n"] += 1
        loss, g = real(h, y)
        return (float("nan"), g) if calls["n"] == 5 else (loss, g)

    monkeypatch.setattr(training, "mse_loss", flaky)
    with pytest.raises(NumericalError, match="step 3"):
        train(small_config())


def test_numerical_rank():
    assert numerical_rank(np.zeros((3, 3))) == 0
    assert numerical_rank(np.diag([1.0, 1e-3, 0.0])) == 2
