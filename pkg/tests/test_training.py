import logging
import math

import numpy as np
import pytest
import torch
from scipy import stats

from eventflow.checkpoint import load_checkpoint
from eventflow.nets import NetConfig, VectorFieldModel
from eventflow.sequences import EventSequence, split_sequences
from eventflow.synthetic import SimulatorSpec, simulate_splits
from eventflow.training import (
    EmptyBatchError,
    TrainConfig,
    TrainingDiverged,
    _batch_sampler,
    build_flow_batch,
    clamp_counts,
    count_loss_from_logits,
    eval_steps,
    flow_loss,
    forecast_batch_prep,
    optimize,
    regression_loss,
    train,
    train_vector_field,
)


def small(**kw):
    base = dict(net=NetConfig.small(), batch_size=16, steps=20, cycle=20, n_evals=2)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# flow loss


def test_perfect_regression_zero_loss():
    b = build_flow_batch([np.array([0.1, 0.5]), np.array([-0.3])], np.random.default_rng(0), 0.01)
    assert float(regression_loss(b.target, b.target, b.mask)) == 0.0


def test_zero_field_identical_endpoints_zero_loss():
    target = torch.zeros(2, 3)
    mask = torch.tensor([[True, True, False], [True, True, True]])
    assert float(regression_loss(torch.zeros(2, 3), target, mask)) == 0.0


def test_single_pair_unit_loss():
    # gamma0 = [0], gamma1 = [1], output 0: ||1 - 0||^2 = 1
    assert float(regression_loss(torch.zeros(1, 1), torch.ones(1, 1), torch.ones(1, 1, dtype=torch.bool))) == 1.0


def test_regression_loss_averages_per_sequence():
    pred = torch.zeros(2, 2)
    target = torch.tensor([[2.0, 0.0], [1.0, 1.0]])
    mask = torch.tensor([[True, False], [True, True]])
    # sequence means 4 and 1, then averaged
    assert float(regression_loss(pred, target, mask)) == pytest.approx(2.5)


def test_flow_batch_skips_empty_and_errors_when_all_empty():
    b = build_flow_batch([np.empty(0), np.array([0.2]), np.empty(0)], np.random.default_rng(0), 0.01)
    assert b.keep == [1] and b.x.shape == (1, 1)
    with pytest.raises(EmptyBatchError):
        build_flow_batch([np.empty(0)], np.random.default_rng(0), 0.01)


def test_flow_batch_draws_s_per_sequence():
    b = build_flow_batch([np.array([0.0])] * 50, np.random.default_rng(0), 0.01)
    assert len(set(b.s.tolist())) == 50


def test_flow_loss_scalar_and_differentiable():
    model = VectorFieldModel(NetConfig.small())
    loss = flow_loss(model, [np.array([-0.5, 0.5]), np.array([0.1])], np.random.default_rng(0), 0.01)
    assert loss.ndim == 0
    loss.backward()
    assert any(p.grad is not None for p in model.parameters())


# ---------------------------------------------------------------------------
# forecast windows


def test_t0_uniform_on_interior():
    seq = EventSequence(np.array([1.0]), 24.0)
    rng = np.random.default_rng(0)
    t0s = [forecast_batch_prep(seq, rng, 4.0).t0 for _ in range(10_000)]
    assert min(t0s) >= 4.0 and max(t0s) <= 20.0
    assert stats.kstest(t0s, stats.uniform(loc=4, scale=16).cdf).pvalue > 0.01


def test_window_example():
    from eventflow.training import make_window

    w = make_window(EventSequence(np.array([1.0, 5.0, 9.0]), 24.0), 4.0, 4.0)
    np.testing.assert_array_equal(w.history, [1.0])
    np.testing.assert_allclose(w.target.events, [1.0])
    assert w.target.support_end == 4.0


def test_empty_sequence_window():
    w = forecast_batch_prep(EventSequence(np.empty(0), 24.0), np.random.default_rng(0), 4.0)
    assert w.history.size == 0 and len(w.target) == 0


def test_short_support_rejected():
    with pytest.raises(ValueError):
        forecast_batch_prep(EventSequence(np.empty(0), 6.0), np.random.default_rng(0), 4.0)


# ---------------------------------------------------------------------------
# count loss


def test_count_loss_point_mass_zero():
    logits = torch.full((1, 6), -1e4, dtype=torch.float64)
    logits[0, 3] = 1e4
    for alpha in (0.0, 1.0, 50.0):
        assert float(count_loss_from_logits(logits, torch.tensor([3]), alpha)) == pytest.approx(0.0, abs=1e-12)


def test_count_loss_uniform_ten():
    logits = torch.zeros(1, 10, dtype=torch.float64)
    assert float(count_loss_from_logits(logits, torch.tensor([0]), 0.0)) == pytest.approx(math.log(10), abs=1e-4)


def test_count_loss_uniform_two_with_regularizer():
    logits = torch.zeros(1, 2, dtype=torch.float64)
    assert float(count_loss_from_logits(logits, torch.tensor([0]), 2.0)) == pytest.approx(1.6931, abs=1e-4)


def test_count_regularizer_zero_only_at_point_mass():
    # k = 0 is part of the transport sum, so mass at 0 is penalised when n > 0
    logits = torch.tensor([[0.0, -1e4]], dtype=torch.float64)
    loss = count_loss_from_logits(logits, torch.tensor([1]), 1.0)
    assert float(loss) > 1.0


def test_clamp_counts_warns(caplog):
    with caplog.at_level(logging.WARNING):
        np.testing.assert_array_equal(clamp_counts([3, 12], 10), [3, 10])
    assert "clamping" in caplog.text


# ---------------------------------------------------------------------------
# config and loop


def test_train_config_from_dict():
    cfg = TrainConfig.from_dict({"net": {"size": "small"}, "dropout": 0.2, "steps": 5})
    assert cfg.net.d_model == 64 and cfg.dropout == 0.2 and cfg.steps == 5


@pytest.mark.parametrize(
    "kw",
    [{"task": "nope"}, {"lr": 0.0}, {"sigma": 0.0}, {"task": "forecast"}, {"alpha": -1.0}, {"dtype": "int8"}],
)
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_eval_steps_evenly_spaced():
    assert eval_steps(100, 10) == list(range(10, 101, 10))
    assert eval_steps(3, 10) == [1, 2, 3]


def test_batch_sampler_covers_each_pass():
    lengths = np.arange(40) % 7
    draw = _batch_sampler(lengths, 8, True)
    rng = np.random.default_rng(0)
    seen = np.concatenate([draw(rng) for _ in range(5)])
    assert sorted(seen.tolist()) == list(range(40))


def test_divergence_raises():
    model = torch.nn.Linear(1, 1)
    with pytest.raises(TrainingDiverged):
        optimize(model, lambda rng: model.weight.sum() * float("nan"), small())


def test_optimize_keeps_best_validation_state():
    model = torch.nn.Linear(1, 1, bias=False)
    vals = iter([3.0, 1.0, 2.0, 5.0])
    res = optimize(model, lambda rng: (model.weight**2).sum(), small(steps=40, n_evals=4), lambda: next(vals))
    assert res.val_steps == [10, 20, 30, 40]
    assert res.best_step == 20 and res.best_val == 1.0


def test_overfits_single_sequence():
    seq = EventSequence(np.array([1.0, 2.5, 4.0, 6.0, 8.5]), 10.0)
    sp = split_sequences([seq] * 10, 10.0, seed=0)
    cfg = small(steps=2000, cycle=2000, batch_size=6, n_evals=1)
    res = train_vector_field(sp, cfg)
    assert np.mean(res.losses[-100:]) < 0.1 * np.mean(res.losses[:10])


def test_training_deterministic():
    sp = simulate_splits(SimulatorSpec("hawkes1", support_end=20.0), 40, 0)
    a = train_vector_field(sp, small(steps=15))
    b = train_vector_field(sp, small(steps=15))
    # CPU kernels are deterministic, so the curves match bit for bit
    assert a.losses == b.losses


def test_train_writes_checkpoints(tmp_path):
    sp = simulate_splits(SimulatorSpec("hawkes1", support_end=24.0), 30, 0)
    out = train(sp, small(task="forecast", delta_t=4.0, steps=4, cycle=4), tmp_path / "run")
    assert out.count is not None
    for sub in ("", "count"):
        ck = load_checkpoint(tmp_path / "run" / sub)
        assert ck.task == "forecast" and ck.delta_t == 4.0
    assert (tmp_path / "run" / "metrics.csv").read_text().startswith("step,train_loss,val_loss")
    assert (tmp_path / "run" / "train_config.json").exists()
    assert load_checkpoint(tmp_path / "run" / "count").kind == "count"


def test_unconditional_manifest_has_count_histogram(tmp_path):
    sp = simulate_splits(SimulatorSpec("homogeneous_poisson", support_end=10.0), 30, 0)
    train(sp, small(steps=3), tmp_path)
    ck = load_checkpoint(tmp_path)
    assert ck.count_distribution.n_max == sp.train.max_count()
    assert ck.count_distribution.mean() == pytest.approx(sp.train.counts().mean())
