import json

import numpy as np
import pytest

from rnp import autodiff as ad
from rnp.data import DataError, TimeSeries, legal_starts, normalize, synth_sine_drift
from rnp.gaussian import SIGMA_FLOOR, HALF_LOG_2PI
from rnp.model import RnpConfig, RnpModel, Subsequence
from rnp.training import (
    Adam,
    TaskBatch,
    TrainConfig,
    adam_step,
    batch_elbo_loss,
    clip_by_global_norm,
    elbo_loss,
    split_context_target,
    train,
)

TOY = RnpConfig(hidden_size=8, latent_dim=4)


def _series(n=100, seed=0):
    rng = np.random.default_rng(seed)
    return TimeSeries("toy", np.linspace(0, 1, n), np.sin(np.arange(n) * 0.3) + 0.05 * rng.normal(size=n))


def _toy_task(seed=0):
    rng = np.random.default_rng(seed)
    ctx = [Subsequence(4 * i, rng.normal(size=(4, 1)), rng.normal(size=(4, 1))) for i in range(3)]
    tgt = Subsequence(12, rng.normal(size=(4, 1)), rng.normal(size=(4, 1)))
    return ctx, tgt


# --- config and splitting ----------------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(context_count_range=(3, 1))
    with pytest.raises(ValueError):
        TrainConfig(context_len=0)


def test_legal_starts_arithmetic():
    starts = legal_starts(100, 20)
    assert starts[0] == 0 and starts[-1] == 80 and len(starts) == 81


def test_split_too_short_series():
    with pytest.raises(DataError):
        split_context_target(_series(10), TrainConfig(context_len=20, target_len=5), np.random.default_rng(0))


def test_split_is_seeded_and_contexts_precede_target():
    s = _series(100)
    cfg = TrainConfig(context_len=10, target_len=15, context_count_range=(1, 4))
    for seed in range(50):
        ctx, tgt = split_context_target(s, cfg, np.random.default_rng(seed))
        ctx2, tgt2 = split_context_target(s, cfg, np.random.default_rng(seed))
        assert [c.start_index for c in ctx] == [c.start_index for c in ctx2]
        assert tgt.start_index == tgt2.start_index
        assert 1 <= len(ctx) <= 4 and len(tgt) == 15 and tgt.end_index <= 100
        assert all(len(c) == 10 and c.end_index <= tgt.start_index for c in ctx)


# --- objective -----------------------------------------------------------------------------------


def test_kl_vanishes_when_context_already_contains_target():
    m = RnpModel.create(TOY, 0)
    ctx, tgt = _toy_task()
    loss, diag = elbo_loss(m, ctx + [tgt], tgt, noise=np.zeros(4))
    assert diag["kl"] == 0.0
    assert diag["loss"] == diag["nll"]


def test_loss_minus_nll_equals_kl():
    m = RnpModel.create(TOY, 1)
    ctx, tgt = _toy_task(1)
    _, diag = elbo_loss(m, ctx, tgt, noise=np.random.default_rng(0).standard_normal(4))
    assert diag["kl"] >= 0
    assert abs(diag["loss"] - diag["nll"] - diag["kl"]) < 1e-12


def test_kl_weight_zero_gives_pure_nll():
    m = RnpModel.create(TOY, 1)
    ctx, tgt = _toy_task(1)
    noise = np.random.default_rng(0).standard_normal(4)
    _, full = elbo_loss(m, ctx, tgt, noise=noise)
    _, ablated = elbo_loss(m, ctx, tgt, noise=noise, kl_weight=0.0)
    assert ablated["loss"] == ablated["nll"] == full["nll"]


def test_empty_context_uses_standard_prior():
    m = RnpModel.create(TOY, 0)
    _, tgt = _toy_task()
    loss, diag = elbo_loss(m, [], tgt, noise=np.zeros(4))
    assert np.isfinite(diag["loss"]) and diag["kl"] > 0


def test_elbo_grad_check_on_toy_instance():
    m = RnpModel.create(TOY, 2)
    ctx, tgt = _toy_task(2)
    noise = np.random.default_rng(5).standard_normal(4)
    report = ad.grad_check(lambda: elbo_loss(m, ctx, tgt, noise=noise)[0], m.param_dict(), 1e-5, 1e-3)
    assert report.passed, report.summary()


def test_batched_loss_matches_single_task_losses():
    m = RnpModel.create(TOY, 3)
    tasks = [_toy_task(s) for s in (10, 11, 12)]
    noise = np.random.default_rng(1).standard_normal((3, 4))
    batch_loss, _ = batch_elbo_loss(m, TaskBatch.from_tasks(m, tasks), noise)
    singles = [elbo_loss(m, c, t, noise=noise[i])[0].item() for i, (c, t) in enumerate(tasks)]
    assert batch_loss.item() == pytest.approx(np.mean(singles), rel=1e-12)


# --- optimiser ------------------------------------------------------------------------------------


def test_adam_unit_step_under_constant_gradient():
    p = np.zeros(3)
    g = np.array([0.5, -2.0, 1e-3])
    m, v = [np.zeros(3)], [np.zeros(3)]
    for t in range(1, 1001):
        before = p.copy()
        adam_step([p], [g], (m, v), lr=0.01, t=t)
    step = np.abs(p - before)
    np.testing.assert_allclose(step, 0.01, rtol=1e-3)


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -1.0])
    adam_step([p], [np.zeros(2)], ([np.zeros(2)], [np.zeros(2)]), lr=0.1, t=1)
    assert p.tolist() == [1.0, -1.0]


def test_adam_skips_non_finite_gradients(caplog):
    p = np.array([1.0, -1.0])
    m, v = [np.zeros(2)], [np.zeros(2)]
    assert not adam_step([p], [np.array([np.nan, 1.0])], (m, v), lr=0.1, t=1)
    assert p.tolist() == [1.0, -1.0] and np.all(m[0] == 0)
    assert "non-finite" in caplog.text
    w = ad.parameter([1.0])
    opt = Adam({"w": w}, 0.1)
    w.grad[...] = np.inf
    assert not opt.step() and opt.skipped == 1 and opt.t == 0 and w.data[0] == 1.0
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(2)], (m, v), lr=0.1, t=0)


def test_clip_by_global_norm():
    grads, norm = clip_by_global_norm([np.array([3.0]), np.array([4.0])], 1.0)
    assert norm == 5.0
    np.testing.assert_allclose([grads[0][0], grads[1][0]], [0.6, 0.8])
    same, _ = clip_by_global_norm([np.array([0.3])], 1.0)
    assert same[0][0] == 0.3


# --- training loop ----------------------------------------------------------------------------------


SMALL_TRAIN = TrainConfig(
    learning_rate=5e-3, batch_size=4, epochs=3, context_len=8, target_len=8, val_tasks=2, seed=3,
)


def test_zero_epochs_leaves_model_unchanged(tmp_path):
    m = RnpModel.create(TOY, 0)
    before = {k: p.data.copy() for k, p in m.param_dict().items()}
    _, log = train(m, _series(), TrainConfig(epochs=0, context_len=8, target_len=8), run_dir=tmp_path)
    assert log == []
    assert (tmp_path / "metrics.jsonl").read_text() == ""
    assert all(np.array_equal(before[k], p.data) for k, p in m.param_dict().items())


def test_training_is_deterministic(tmp_path):
    logs, params = [], []
    for run in ("a", "b"):
        m = RnpModel.create(TOY, 0)
        train(m, _series(), SMALL_TRAIN, run_dir=tmp_path / run)
        logs.append((tmp_path / run / "metrics.jsonl").read_bytes())
        params.append(b"".join(p.data.tobytes() for p in m.parameters()))
    assert logs[0] == logs[1] and params[0] == params[1]
    rows = [json.loads(line) for line in logs[0].decode().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert set(rows[0]) == {"epoch", "train_loss", "train_nll", "train_kl", "val_nll", "val_mse", "wall_ms"}


def test_checkpoints_written(tmp_path):
    cfg = TrainConfig(**{**SMALL_TRAIN.to_dict(), "epochs": 4, "checkpoint_every": 2})
    train(RnpModel.create(TOY, 0), _series(), cfg, run_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.glob("*.rnpc"))
    assert names == ["ckpt_epoch000002.rnpc", "ckpt_epoch000004.rnpc", "final.rnpc"]


def test_sine_training_reduces_validation_nll():
    ts, _ = normalize(synth_sine_drift(400, seed=0), 360)
    cfg = TrainConfig(learning_rate=1e-2, batch_size=4, epochs=200, context_len=10, target_len=10, seed=0)
    _, log = train(RnpModel.create(RnpConfig(hidden_size=8, latent_dim=4), 0), ts, cfg)
    assert log[-1]["val_nll"] < log[0]["val_nll"]


def test_single_task_overfit():
    m = RnpModel.create(RnpConfig(hidden_size=16, latent_dim=4), 0)
    ctx, tgt = _toy_task(7)
    tgt = Subsequence(12, tgt.xs, 0.5 * np.sin(np.arange(4.0))[:, None])
    opt = Adam(m.param_dict(), 1e-2, 5.0)
    rng = np.random.default_rng(0)
    for _ in range(2000):
        opt.zero_grad()
        loss, diag = elbo_loss(m, ctx, tgt, rng=rng)
        ad.backward(loss)
        opt.step()
    per_step_nll = diag["nll"] / len(tgt)
    # log-likelihood at a residual of one sigma with sigma = 2 * floor
    reference = -(-HALF_LOG_2PI - np.log(2 * SIGMA_FLOOR) - 0.5)
    assert per_step_nll < reference
