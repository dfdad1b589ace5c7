"""Optimizer, schedule, Pareto front, and training-loop behavior."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitgrad.autodiff import Tensor
from bitgrad.data import split, synth_dataset
from bitgrad.layers import QModel
from bitgrad.resource import LossConfig
from bitgrad.training import (
    CSV_HEADER,
    Adam,
    MetricsRow,
    ParetoSet,
    TrainingDiverged,
    TrainSettings,
    cosine_restarts_lr,
    evaluate,
    metrics_csv,
    train,
)

from oracles import adam_reference


# ---------------------------------------------------------------------------
# Adam


def test_adam_matches_scalar_reference():
    grads = [0.3, -0.8, 0.12, 0.9, -0.05]
    p = Tensor(np.array([1.5]))
    opt = Adam([p], beta1=0.9, beta2=0.999, eps=1e-8)
    for g in grads:
        p.grad = np.array([g])
        opt.step(1e-2)
    want = adam_reference(grads, 1e-2, 0.9, 0.999, 1e-8, 1.5)
    assert float(p.data[0]) == pytest.approx(want, rel=1e-12)


def test_adam_lr_scales():
    a = Tensor(np.array([1.0]))
    b = Tensor(np.array([1.0]))
    c = Tensor(np.array([1.0]))
    opt = Adam([a, b, c], lr_scales=[1.0, 2.0, 0.0])
    for g in [0.5, -0.2, 0.7]:
        a.grad = b.grad = c.grad = np.array([g])
        opt.step(1e-3)
    assert float(c.data[0]) == 1.0  # scale 0: frozen
    da, db = 1.0 - float(a.data[0]), 1.0 - float(b.data[0])
    assert db == pytest.approx(2 * da, rel=1e-12)


def test_adam_skips_missing_grads():
    a = Tensor(np.array([1.0]))
    b = Tensor(np.array([2.0]))
    opt = Adam([a, b])
    a.grad = np.array([1.0])
    b.grad = None
    opt.step(1e-2)
    assert float(a.data[0]) != 1.0
    assert float(b.data[0]) == 2.0


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_cosine_restarts_endpoints():
    kw = dict(t0=10, t_mult=2, lr_max=1e-2, lr_min=1e-5)
    assert cosine_restarts_lr(0, **kw) == pytest.approx(1e-2)
    assert cosine_restarts_lr(10, **kw) == pytest.approx(1e-5)
    assert cosine_restarts_lr(11, **kw) == pytest.approx(1e-2)   # restart
    assert cosine_restarts_lr(31, **kw) == pytest.approx(1e-5)   # 2x period
    assert cosine_restarts_lr(32, **kw) == pytest.approx(1e-2)
    assert cosine_restarts_lr(5, **kw) == pytest.approx((1e-2 + 1e-5) / 2)


def test_cosine_restarts_monotone_within_cycle():
    vals = [cosine_restarts_lr(t, 10, 2, 1e-2, 1e-5) for t in range(11)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_cosine_restarts_rejects_bad_args():
    for bad in [dict(step=-1, t0=10), dict(step=0, t0=0), dict(step=0, t0=5, t_mult=0)]:
        with pytest.raises(ValueError):
            cosine_restarts_lr(bad["step"], bad["t0"], bad.get("t_mult", 2), 1e-2, 1e-5)


# ---------------------------------------------------------------------------
# Pareto front


def test_pareto_worked_sequence():
    ps = ParetoSet()
    assert ps.insert(0.8, 100.0, 0, {})
    assert not ps.insert(0.8, 100.0, 1, {})   # exact tie counts as dominated
    assert ps.insert(0.9, 120.0, 2, {})
    assert ps.insert(0.7, 90.0, 3, {})
    assert ps.insert(0.95, 80.0, 4, {})       # dominates everything so far
    assert [(e.metric, e.cost) for e in ps.entries] == [(0.95, 80.0)]
    assert ps.insert(0.96, 200.0, 5, {})
    assert ps.insert(0.955, 100.0, 6, {})
    assert [(e.metric, e.cost) for e in ps.entries] == [
        (0.95, 80.0), (0.955, 100.0), (0.96, 200.0)
    ]


@settings(max_examples=200)
@given(
    pts=st.lists(
        st.tuples(
            st.floats(0, 1).map(lambda v: round(v, 2)),
            st.floats(1, 100).map(lambda v: round(v, 1)),
        ),
        max_size=30,
    )
)
def test_pareto_invariants(pts):
    ps = ParetoSet()
    for k, (metric, cost) in enumerate(pts):
        ps.insert(metric, cost, k, {})
    es = ps.entries
    for a in es:
        for b in es:
            if a is not b:
                assert not (a.metric >= b.metric and a.cost <= b.cost)
    assert all(a.cost < b.cost for a, b in zip(es, es[1:]))
    assert all(a.metric < b.metric for a, b in zip(es, es[1:]))
    if pts:
        best = max(m for m, _ in pts)
        assert es and es[-1].metric == best  # the top metric always survives


# ---------------------------------------------------------------------------
# metrics rows


def test_metrics_row_csv_and_header():
    row = MetricsRow(epoch=2, step=10, lr=0.003, beta=1e-05,
                     train_loss=0.5, val_metric=0.75, bitops=123.0)
    assert row.csv() == "2,10,0.003,1e-05,0.5,0.75,123.0"
    assert CSV_HEADER == "epoch,step,lr,beta,train_loss,val_metric,bitops"
    out = metrics_csv([row])
    assert out == CSV_HEADER + "\n" + row.csv() + "\n"


# ---------------------------------------------------------------------------
# evaluate


def _fixed_model(sizes):
    m = QModel.mlp(sizes, seed=0)
    for layer in m.layers:
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = 0.0
    return m


def test_evaluate_accuracy():
    m = _fixed_model([2, 2])
    m.layers[0].weight.data = np.eye(2)
    X = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]])
    y = np.array([0, 1, 1])
    assert evaluate(m, X, y, "classification") == pytest.approx(2 / 3)


def test_evaluate_regression_negative_rmse():
    m = _fixed_model([2, 1])
    m.layers[0].weight.data = np.array([[1.0], [1.0]])
    X = np.array([[1.0, 0.0], [0.0, 2.0]])
    y = np.array([1.0, 1.5])
    assert evaluate(m, X, y, "regression") == pytest.approx(-math.sqrt(0.125))


# ---------------------------------------------------------------------------
# the loop itself


def _blob_data(n=400, features=2, classes=2, sep=4.0, seed=1):
    X, y = synth_dataset(n, seed=seed, n_features=features, n_classes=classes,
                         separation=sep)
    return split(X, y, val_fraction=0.25, seed=seed, task="classification")


def test_train_reaches_high_accuracy_without_penalties():
    ds = _blob_data()
    m = QModel.mlp([2, 8, 2], seed=3)
    settings_ = TrainSettings(epochs=8, batch_size=32, lr=1e-2,
                              loss=LossConfig(0.0, 0.0, 0.0), seed=3)
    result = train(m, ds.X_train, ds.y_train, ds.X_val, ds.y_val, settings_)
    assert result.rows[-1].val_metric >= 0.99
    assert result.total_steps == 8 * math.ceil(ds.X_train.shape[0] / 32)
    assert len(result.rows) == 8
    assert result.pareto.entries  # something survived


def test_train_is_deterministic():
    ds = _blob_data(n=150, features=4, classes=3, seed=7)
    outs = []
    for _ in range(2):
        m = QModel.mlp([4, 6, 3], seed=11)
        settings_ = TrainSettings(epochs=3, batch_size=32,
                                  loss=LossConfig(1e-6, 1e-4, 1e-8), seed=11)
        r = train(m, ds.X_train, ds.y_train, ds.X_val, ds.y_val, settings_)
        outs.append((metrics_csv(r.rows), r.final_state))
    assert outs[0][0] == outs[1][0]  # byte-identical metrics
    for k in outs[0][1]:
        assert np.array_equal(outs[0][1][k], outs[1][1][k])


@pytest.mark.filterwarnings("ignore:overflow")
def test_train_raises_on_divergence():
    X = np.random.default_rng(0).normal(size=(16, 2))
    y = np.full(16, 1e200)
    m = QModel.mlp([2, 1], seed=0)
    settings_ = TrainSettings(epochs=1, batch_size=16, task="regression",
                              loss=LossConfig(0.0, 0.0, 0.0))
    with pytest.raises(TrainingDiverged):
        train(m, X, y, X, y, settings_)


def test_train_rejects_empty():
    m = QModel.mlp([2, 2], seed=0)
    with pytest.raises(ValueError):
        train(m, np.zeros((0, 2)), np.zeros(0, dtype=int),
              np.zeros((1, 2)), np.zeros(1, dtype=int), TrainSettings())
