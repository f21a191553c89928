import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treenet import ops
from treenet.layers import Parameter
from treenet.tensor import Tensor
from treenet.train import (
    DataConfig,
    TrainConfig,
    desk_config,
    evaluate,
    history_to_csv,
    lr_at,
    make_synthetic,
    sgd_step,
    train,
)
from treenet.zoo import build_model, treenet_spec

PAPER = TrainConfig()


def small_model(seed=0, classes=4, divisor=8):
    return build_model(treenet_spec(20, width_divisor=divisor, num_classes=classes), seed=seed)


# -- schedule ----------------------------------------------------------------


@pytest.mark.parametrize(
    "epoch,lr", [(0, 0.0), (2.5, 0.05), (5, 0.1), (29.9, 0.1), (30, 0.01), (31, 0.01), (61, 0.001), (95, 1e-4)]
)
def test_lr_schedule_points(epoch, lr):
    assert lr_at(PAPER, epoch) == pytest.approx(lr, rel=1e-12, abs=1e-15)


def test_lr_continuous_at_warmup_end():
    assert lr_at(PAPER, 5 - 1e-9) == pytest.approx(lr_at(PAPER, 5), rel=1e-8)


@given(st.floats(0, 100), st.floats(0, 100))
def test_lr_monotone_after_warmup(a, b):
    a, b = sorted((a, b))
    if a >= PAPER.warmup_epochs:
        assert lr_at(PAPER, b) <= lr_at(PAPER, a)


def test_lr_rejects_negative_epoch():
    with pytest.raises(ValueError):
        lr_at(PAPER, -1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=5, warmup_epochs=5)
    with pytest.raises(ValueError):
        TrainConfig(base_lr=-0.1)


# -- optimizer ---------------------------------------------------------------


def _param(v, no_decay=False):
    return Parameter(np.array(v, dtype=np.float64), no_decay=no_decay)


def test_sgd_vanilla_step():
    p, g = _param([1.0, -2.0]), np.array([0.5, 0.25])
    sgd_step([p], [g], {}, TrainConfig(momentum=0, weight_decay=0), lr=1.0)
    assert p.data.tolist() == [0.5, -2.25]


def test_sgd_momentum_two_steps():
    p, g, lr = _param([0.0]), np.array([2.0]), 0.1
    cfg, state = TrainConfig(momentum=0.9, weight_decay=0), {}
    for _ in range(2):
        sgd_step([p], [g], state, cfg, lr=lr)
    assert p.data[0] == pytest.approx(-lr * 2.0 * (1 + 1.9), rel=1e-14)


def test_sgd_weight_decay_geometric():
    p = _param([3.0])
    cfg, lr, wd = TrainConfig(momentum=0, weight_decay=0.01), 0.5, 0.01
    for _ in range(4):
        sgd_step([p], [np.zeros(1)], {}, cfg, lr=lr)
    assert p.data[0] == pytest.approx(3.0 * (1 - lr * wd) ** 4, rel=1e-14)


def test_sgd_no_decay_flag():
    p = _param([3.0], no_decay=True)
    sgd_step([p], [np.zeros(1)], {}, TrainConfig(momentum=0, weight_decay=0.5), lr=1.0)
    assert p.data[0] == 3.0


def test_sgd_missing_grad():
    with pytest.raises(ValueError):
        sgd_step([_param([1.0])], [None], {}, PAPER)


# -- data --------------------------------------------------------------------


def test_synthetic_contract():
    ds = make_synthetic(4, 32, 64, 7)
    assert ds.images.shape == (128, 3, 64, 64) and ds.images.dtype == np.float32
    assert np.bincount(ds.labels).tolist() == [32, 32, 32, 32]
    again = make_synthetic(4, 32, 64, 7)
    assert np.array_equal(ds.images, again.images) and np.array_equal(ds.labels, again.labels)
    assert not np.array_equal(ds.images, make_synthetic(4, 32, 64, 8).images)


def test_synthetic_rejects_empty():
    with pytest.raises(ValueError):
        make_synthetic(0, 4)


def test_linear_probe_separates_default_data():
    """Ridge regression on raw pixels: the default task is linearly separable."""
    cfg = DataConfig()
    tr, va = cfg.make("train"), cfg.make("val")
    X = tr.images.reshape(len(tr), -1).astype(np.float64)
    Y = np.eye(cfg.classes)[tr.labels]
    # dual form: n x n system instead of d x d
    alpha = np.linalg.solve(X @ X.T + 10.0 * np.eye(len(X)), Y)
    pred = (va.images.reshape(len(va), -1) @ (X.T @ alpha)).argmax(axis=1)
    assert (pred == va.labels).mean() >= 0.90


# -- loop --------------------------------------------------------------------


def test_initial_loss_near_log_classes():
    ds = DataConfig().make()
    model = small_model(divisor=4)
    assert evaluate(model, ds, batch_stats=True)["loss"] == pytest.approx(math.log(4), rel=0.15)


def test_lr_zero_leaves_params_unchanged():
    model = small_model()
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    ds = DataConfig(per_class=4).make()
    train(model, ds, TrainConfig(epochs=1, batch_size=8, base_lr=0.0, warmup_epochs=0))
    assert all(np.array_equal(before[n], p.data) for n, p in model.named_parameters())


def test_one_step_moves_every_parameter():
    model = small_model()
    ds = DataConfig(per_class=4).make()
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    loss, _ = ops.softmax_cross_entropy(model(Tensor(ds.images)), ds.labels)
    model.zero_grad()
    loss.backward()
    params = model.parameters()
    sgd_step(params, [p.grad for p in params], {}, desk_config(), lr=0.1)
    unchanged = [n for n, p in model.named_parameters() if np.array_equal(before[n], p.data)]
    assert unchanged == []


def test_training_bitwise_reproducible():
    ds = DataConfig(per_class=4).make()
    cfg = TrainConfig(epochs=2, batch_size=8, warmup_epochs=1, flip=True)
    runs = []
    for _ in range(2):
        model = small_model(seed=3)
        hist = train(model, ds, cfg)
        runs.append((hist, model.state_dict()))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_metrics_and_csv():
    ds = DataConfig(per_class=5).make()
    val = DataConfig(per_class=5, val_per_class=3).make("val")
    hist = train(small_model(classes=4), ds, TrainConfig(epochs=2, batch_size=6, warmup_epochs=1), val=val)
    for rec in hist:
        assert rec["top5"] >= rec["top1"] and rec["val_top5"] >= rec["val_top1"]
    rows = list(csv.DictReader(io.StringIO(history_to_csv(hist))))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert float(rows[1]["loss"]) == hist[1]["loss"]


def test_short_final_batch_is_used():
    # 9 samples, batch 4: steps of 4, 4, 1; the single-sample batch is skipped
    ds = make_synthetic(3, 3, 32, 0)
    hist = train(small_model(classes=3), ds, TrainConfig(epochs=1, batch_size=4, warmup_epochs=0))
    assert hist[0]["top1"] * 8 == round(hist[0]["top1"] * 8)
    ds = make_synthetic(2, 5, 32, 0)  # 10 samples: 4, 4, 2
    hist = train(small_model(classes=2), ds, TrainConfig(epochs=1, batch_size=4, warmup_epochs=0))
    assert hist[0]["top1"] * 10 == round(hist[0]["top1"] * 10)


def test_evaluate_empty_dataset():
    ds = make_synthetic(2, 1, 16)
    ds.images, ds.labels = ds.images[:0], ds.labels[:0]
    with pytest.raises(ValueError):
        evaluate(small_model(classes=2), ds)


def test_zero_signal_stays_at_chance():
    cfg = DataConfig(signal=0.0, val_per_class=64)
    model = build_model(treenet_spec(20, width_divisor=4, num_classes=4), seed=0)
    train(model, cfg.make("train"), desk_config(epochs=6))
    assert abs(evaluate(model, cfg.make("val"))["top1"] - 0.25) <= 0.1
