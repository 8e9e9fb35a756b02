import numpy as np
import pytest

from matchattn import Tape, Var, ops
from matchattn.decoder import MatchDecoder, preset
from matchattn.synthetic import gen_scene
from matchattn.training import (
    SEED_ENV,
    DivergenceError,
    ParamStore,
    TrainConfig,
    adamw_step,
    load_checkpoint,
    one_cycle_lr,
    resolve_seed,
    save_checkpoint,
    train_toy,
)


def test_linear_sum_gradient(f64, rng):
    x, W = rng.normal(size=(4, 3)), Var(rng.normal(size=(3, 2)), True)
    with Tape() as tape:
        y = ops.sum_(ops.linear(x, W))
    tape.backward(y)
    np.testing.assert_allclose(W.grad, x.T @ np.ones((4, 2)), rtol=1e-14)


def test_fan_in_sums_branches(f64):
    a = Var(np.array([1.5, -2.0]), True)
    with Tape() as tape:
        y = ops.sum_(ops.add(ops.mul(a, 3.0), ops.mul(a, a)))
    tape.backward(y)
    np.testing.assert_allclose(a.grad, 3.0 + 2 * a.data)


class TestAdamW:
    def test_zero_gradient_zero_decay(self):
        p = Var(np.arange(4.0), name="p")
        store = ParamStore({"p": p})
        adamw_step(store, TrainConfig(weight_decay=0.0), 0, lr=1e-2)
        np.testing.assert_array_equal(p.data, np.arange(4.0))

    def test_first_step_closed_form(self):
        cfg = TrainConfig(weight_decay=0.05)
        p = Var(np.array([2.0, -1.0]), name="p")
        p.grad = np.ones(2)
        adamw_step(ParamStore({"p": p}), cfg, 0, lr=1e-3)
        expected = np.array([2.0, -1.0]) * (1 - 1e-3 * 0.05) - 1e-3 / (1 + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-15)

    def test_decay_alone_shrinks_by_exact_factor(self):
        p = Var(np.array([3.0, -4.0]), name="p")
        store = ParamStore({"p": p})
        for _ in range(3):
            adamw_step(store, TrainConfig(weight_decay=0.05), 0, lr=0.1)
        np.testing.assert_allclose(p.data, np.array([3.0, -4.0]) * (1 - 0.1 * 0.05) ** 3, rtol=1e-15)


class TestSchedule:
    def test_shape(self):
        cfg = TrainConfig(lr=1.0, steps=1000)
        lrs = np.array([one_cycle_lr(s, cfg) for s in range(1000)])
        assert lrs.argmax() == 49 and lrs.max() == 1.0
        assert (np.diff(lrs[:50]) > 0).all() and (np.diff(lrs[50:]) <= 0).all()
        assert lrs[-1] == pytest.approx(1 / 25)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(steps=0)


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "17")
    assert resolve_seed(3) == 17
    monkeypatch.delenv(SEED_ENV)
    assert resolve_seed(3) == 3


@pytest.fixture(scope="module")
def tiny_scene():
    return gen_scene("constant_shift", 32, 64, {"d": 2}, seed=0)


def test_ten_steps_bitwise_deterministic(tiny_scene):
    cfg = TrainConfig(steps=10, seed=5)
    (m1, t1), (m2, t2) = (train_toy([tiny_scene], cfg, preset("desk")) for _ in range(2))
    assert t1 == t2
    assert all(np.array_equal(m1.params[k].data, m2.params[k].data) for k in m1.params)


def test_trace_csv_and_loss_drop(tmp_path, tiny_scene):
    _, trace = train_toy([tiny_scene], TrainConfig(steps=30, lr=1e-3), preset("desk"), trace_path=tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,loss,l_init,l_self,l_cross,epe" and len(lines) == 31
    assert np.mean([r["loss"] for r in trace[-5:]]) < np.mean([r["loss"] for r in trace[:5]])


def test_divergence_guard(tiny_scene):
    with pytest.raises(DivergenceError) as e:
        train_toy([tiny_scene], TrainConfig(steps=3, max_loss=1e-9), preset("desk"))
    assert e.value.step == 0


def test_empty_dataset():
    with pytest.raises(ValueError):
        train_toy([], TrainConfig(steps=1), preset("desk"))


def test_checkpoint_round_trip(tmp_path):
    m = MatchDecoder(preset("desk", "flow"), seed=9)
    save_checkpoint(tmp_path / "ck", m, {"note": "x"})
    back = load_checkpoint(tmp_path / "ck")
    assert back.cfg == m.cfg
    assert all(np.array_equal(back.params[k].data, m.params[k].data) for k in m.params)
