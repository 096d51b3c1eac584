import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TINY
from hive3d import model as cnn
from hive3d import trainer as tr
from hive3d.errors import ConfigError, NumericError


def test_default_composition_counts():
    assert tuple(tr.composition_counts(16, tr.DEFAULT_COMPOSITION).values()) == (1, 2, 4, 9)
    assert tuple(tr.composition_counts(100, tr.DEFAULT_COMPOSITION).values()) == (8, 12, 23, 57)
    assert tr.composition_counts(16, {"clean": 1.0}) == {"clean": 16, "augmented": 0, "pgd": 0, "fgsm": 0}


@given(st.integers(0, 500), st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4).filter(lambda v: sum(v) > 0))
def test_composition_counts_sum_and_quota(n, raw):
    fr = dict(zip(tr.CATEGORIES, np.asarray(raw) / sum(raw)))
    counts = tr.composition_counts(n, fr)
    assert sum(counts.values()) == n
    for c in tr.CATEGORIES:
        assert abs(counts[c] - fr[c] * n) < 1 + 1e-9


def test_compose_batch_uses_given_params(rng):
    x = rng.uniform(0, 1, (16, 1, 8, 8, 8)).astype(np.float32)
    y = rng.integers(0, 2, 16)
    cfg = tr.TrainConfig(regime=tr.ADVERSARIAL)
    a, kinds = tr.compose_batch(x, y, cfg, cnn.init(1, TINY), np.random.default_rng(0))
    b, kinds_b = tr.compose_batch(x, y, cfg, cnn.init(2, TINY), np.random.default_rng(0))
    assert kinds == kinds_b and [kinds.count(c) for c in tr.CATEGORIES] == [1, 2, 4, 9]
    clean = np.array([k == "clean" for k in kinds])
    assert np.array_equal(a[clean], x[clean])
    adv = np.array([k in ("pgd", "fgsm") for k in kinds])
    assert not np.array_equal(a[adv], b[adv])  # attacks follow the parameters they are given


def test_adamw_zero_gradient():
    p = [np.array([1.0, -2.0])]
    st_ = tr.OptimizerState.zeros_like(p)
    tr.adamw_step(p, [np.zeros(2)], st_, lr=0.1, wd=0.0)
    assert np.array_equal(p[0], [1.0, -2.0])
    tr.adamw_step(p, [np.zeros(2)], st_, lr=0.1, wd=0.5)
    np.testing.assert_allclose(p[0], np.array([1.0, -2.0]) * (1 - 0.05), rtol=0, atol=1e-15)


def test_adamw_first_step_is_lr_sign():
    p = [np.array([0.0, 0.0])]
    tr.adamw_step(p, [np.array([3.0, -0.2])], tr.OptimizerState.zeros_like(p), lr=0.01, wd=0.0)
    np.testing.assert_allclose(p[0], [-0.01, 0.01], rtol=1e-6)


def test_adamw_quadratic_converges():
    target = 1.7
    p = [np.array([-3.0])]
    state = tr.OptimizerState.zeros_like(p)
    for _ in range(5000):
        tr.adamw_step(p, [2 * (p[0] - target)], state, lr=0.01, wd=0.0)
        if abs(p[0][0] - target) < 1e-3 and state.step > 100:
            break
    assert abs(p[0][0] - target) < 1e-3 and state.step <= 5000


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_adamw_rejects_non_finite(bad):
    p = [np.zeros(2)]
    with pytest.raises(NumericError):
        tr.adamw_step(p, [np.array([0.0, bad])], tr.OptimizerState.zeros_like(p), 0.1, 0.0)


def test_plateau_two_reductions():
    s = tr.PlateauScheduler(5e-5, 0.5, 3, 3)
    s.step(0.9)
    for _ in range(8):
        s.step(0.9)
    assert s.reductions == 2 and s.lr == pytest.approx(1.25e-5, rel=0, abs=1e-20)
    assert not s.should_stop


def test_plateau_stop_and_reset():
    s = tr.PlateauScheduler(1.0, 0.5, 1, 2)
    s.step(0.5)
    for _ in range(3):
        s.step(0.5)
    assert s.stalled_reductions == 1 and not s.should_stop
    s.step(0.6)  # improvement resets the stall count but keeps the lr
    assert s.stalled_reductions == 0 and s.lr == 0.5
    for _ in range(4):
        s.step(0.6)
    assert s.should_stop and s.reductions == 3


def _toy_data(seed, n):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    x = rng.uniform(0.6, 1.0, (n, 1, 8, 8, 8)).astype(np.float32)
    x[y == 1, :, 4:, 2:6, 2:6] *= 0.3
    return x, y


def _tiny_cfg(**kw):
    base = dict(batch_size=8, lr=3e-3, max_epochs=3, seed=5, plateau_patience=1, max_lr_reductions=1)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_train_deterministic_log():
    train, val = _toy_data(0, 16), _toy_data(1, 8)
    a = tr.train(train, val, _tiny_cfg(), arch=TINY)
    b = tr.train(train, val, _tiny_cfg(), arch=TINY)
    assert a.log_text() == b.log_text()
    assert a.params.meta["best_epoch"] == a.best_epoch
    lines = a.log_text().splitlines()
    assert "# epoch, train_loss, val_acc, val_prec, val_rec, lr, regime" in lines
    rows = [l for l in lines if not l.startswith("#")]
    assert len(rows) == len(a.epochs) and rows[0].startswith("1, ") and rows[0].endswith(", clean")
    assert any(l.startswith("# betas = [0.9, 0.999]") for l in lines)


def test_train_loss_decreases_on_toy_problem():
    cfg = _tiny_cfg(max_epochs=8, plateau_patience=20, lr=3e-3, seed=6)
    res = tr.train(_toy_data(0, 32), _toy_data(1, 16), cfg, arch=TINY)
    losses = [e.train_loss for e in res.epochs]
    assert len(losses) == 8 and all(np.isfinite(losses))
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_adversarial_regime_runs():
    cfg = _tiny_cfg(regime=tr.ADVERSARIAL, max_epochs=1)
    res = tr.train(_toy_data(0, 16), _toy_data(1, 8), cfg, arch=TINY)
    assert res.epochs[0].regime == tr.ADVERSARIAL and np.isfinite(res.epochs[0].train_loss)


def test_best_checkpoint_is_a_copy():
    res = tr.train(_toy_data(0, 16), _toy_data(1, 8), _tiny_cfg(max_epochs=2), arch=TINY)
    assert res.params is not res.final_params
    assert not res.params.head_weight.requires_grad


def test_empty_split_rejected():
    x, y = _toy_data(0, 8)
    with pytest.raises(ConfigError):
        tr.train((x[:0], y[:0]), (x, y), _tiny_cfg(), arch=TINY)


@pytest.mark.parametrize(
    "kw",
    [
        dict(regime="mixed"),
        dict(composition={"clean": 0.5}),
        dict(composition={"clean": 1.5, "fgsm": -0.5}),
        dict(composition={"other": 1.0}),
        dict(batch_size=0),
        dict(lr=0.0),
        dict(plateau_factor=1.0),
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        tr.TrainConfig(**kw).validate()
