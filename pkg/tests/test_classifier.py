import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_diff, rel_error
from timedroid.classifier import (
    LrModel, MetricsReport, class_weights, evaluate, grid_search, lr_grad, lr_loss, predict, sigmoid, train_lr,
)
from timedroid.dataset import TimestampedSample, time_folds
from timedroid.errors import EmptyTestSet, FingerprintMismatch, NonFiniteInput, SingleClass, TemporalLeak


@pytest.mark.parametrize("n_mal,n_ben,w_mal,w_ben", [
    (1000, 9000, 5.0, 0.5556),
    (500, 500, 1.0, 1.0),
    (100, 9900, 50.0, 0.5051),
])
def test_class_weights(n_mal, n_ben, w_mal, w_ben):
    cw = class_weights([1] * n_mal + [0] * n_ben)
    assert round(cw["malware"], 4) == w_mal
    assert round(cw["benign"], 4) == w_ben


def test_single_class_rejected():
    with pytest.raises(SingleClass):
        class_weights([0, 0, 0])
    with pytest.raises(SingleClass):
        train_lr(np.ones((3, 2)), [1, 1, 1])


def blobs(seed, n=200, d=4, sep=1.0):
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < 0.3).astype(int)
    X = rng.normal(size=(n, d)) + sep * y[:, None]
    return X, y


def test_loss_gradient_matches_finite_differences():
    X, y = blobs(0, n=40)
    rng = np.random.default_rng(1)
    s = rng.uniform(0.5, 3.0, size=40)
    params = {"w": rng.normal(size=4), "b": np.array([0.3])}
    gw, gb = lr_grad(params["w"], params["b"][0], X, y, s, 0.7)
    numeric = central_diff(lambda: lr_loss(params["w"], params["b"][0], X, y, s, 0.7), params)
    assert rel_error({"w": gw, "b": np.array([gb])}, numeric) < 1e-6


def test_sigmoid_stable_at_extremes():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.array_equal(out, [0.0, 0.5, 1.0])


def test_separable_set_fits_perfectly():
    X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [3.0, 3.0], [3.0, 4.0], [4.0, 3.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    m = train_lr(X, y, C=10.0)
    assert m.stop_reason == "converged"
    assert evaluate(m, X, y).accuracy == 1.0


def test_duplicating_rows_keeps_the_boundary():
    X, y = blobs(2)
    a = train_lr(X, y, C=1.0)
    b = train_lr(np.vstack([X, X]), np.concatenate([y, y]), C=1.0)
    assert np.allclose(a.weights, b.weights, atol=1e-6)
    assert a.bias == pytest.approx(b.bias, abs=1e-6)


def test_scaling_class_weights_keeps_the_boundary():
    X, y = blobs(3)
    cw = class_weights(y)
    a = train_lr(X, y, weights=cw, C=1.0)
    b = train_lr(X, y, weights={k: 7.5 * v for k, v in cw.items()}, C=1.0)
    assert np.allclose(a.weights, b.weights, atol=1e-6)


@settings(max_examples=20)
@given(st.integers(0, 2**31))
def test_convex_objective_reaches_same_optimum_from_any_start(seed):
    X, y = blobs(seed % 1000, n=80)
    a = train_lr(X, y, C=0.5, seed=seed)
    b = train_lr(X, y, C=0.5, seed=seed + 1)
    assert np.allclose(a.weights, b.weights, atol=1e-5)


def test_gradient_descent_agrees_with_newton():
    X, y = blobs(4, n=100, d=3)
    a = train_lr(X, y, C=1.0, solver="newton")
    b = train_lr(X, y, C=1.0, solver="gd", tol=1e-7, max_iter=200_000)
    assert b.stop_reason == "converged"
    assert np.allclose(a.weights, b.weights, atol=1e-4)


def test_max_iter_logged_not_raised(caplog):
    X, y = blobs(5)
    m = train_lr(X, y, solver="gd", max_iter=3)
    assert m.stop_reason == "max_iter" and m.iterations == 3
    assert "max_iter" in caplog.text


def test_non_finite_rejected():
    X, y = blobs(6, n=10)
    X[0, 0] = np.nan
    with pytest.raises(NonFiniteInput):
        train_lr(X, y)


def test_metrics_example():
    rep = MetricsReport(tp=89, fp=11, tn=3889, fn=11)
    assert (rep.precision, rep.recall, rep.f1) == pytest.approx((0.89, 0.89, 0.89))
    assert rep.accuracy == pytest.approx(0.9945)


def test_all_correct_and_degenerate_metrics():
    rep = MetricsReport.from_labels([1, 0, 1, 0], [1, 0, 1, 0])
    assert rep.summary()["f1"] == 1.0 and rep.accuracy == 1.0
    none = MetricsReport.from_labels([0, 0], [0, 0])
    assert none.precision == 0.0 and none.recall == 0.0 and none.f1 == 0.0


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
def test_metrics_counts_match_brute_force(pairs):
    t, p = zip(*pairs)
    rep = MetricsReport.from_labels(t, p)
    assert rep.tp == sum(a == 1 and b == 1 for a, b in pairs)
    assert rep.fn == sum(a == 1 and b == 0 for a, b in pairs)
    assert rep.n == len(pairs)
    assert 0 <= rep.f1 <= 1


def zero_model(d=3, threshold=0.5):
    from timedroid.classifier import Scaler
    return LrModel(np.zeros(d), 0.0, 1.0, {"benign": 1.0, "malware": 1.0}, Scaler(np.zeros(d), np.ones(d)), threshold)


def test_zero_weights_predict_half():
    prob, labels = predict(zero_model(), np.random.default_rng(0).normal(size=(5, 3)))
    assert np.all(prob == 0.5) and np.all(labels == 1)


def test_threshold_monotone():
    X, y = blobs(7)
    m = train_lr(X, y)
    counts = []
    for th in (0.1, 0.3, 0.5, 0.7, 0.9):
        m.threshold = th
        counts.append(int(predict(m, X)[1].sum()))
    assert counts == sorted(counts, reverse=True)
    with pytest.raises(ValueError):
        zero_model(threshold=1.0)


def test_evaluate_guards():
    X, y = blobs(8, n=20)
    ids = [str(i) for i in range(20)]
    m = train_lr(X[:15], y[:15], ids=ids[:15], input_fingerprint="e" * 64)
    with pytest.raises(TemporalLeak):
        evaluate(m, X[10:], y[10:], ids[10:])
    with pytest.raises(EmptyTestSet):
        evaluate(m, X[:0], y[:0], [])
    with pytest.raises(FingerprintMismatch):
        evaluate(m, X[15:], y[15:], ids[15:], input_fingerprint="d" * 64)
    with pytest.raises(FingerprintMismatch):
        predict(m, np.ones((2, 5)))
    rep = evaluate(m, X[15:], y[15:], ids[15:], input_fingerprint="e" * 64)
    assert rep.n == 5


def test_model_json_roundtrip(tmp_path):
    X, y = blobs(9)
    m = train_lr(X, y, ids=["a", "b"])
    m.save(tmp_path / "m.json")
    back = LrModel.load(tmp_path / "m.json")
    assert np.array_equal(predict(back, X)[0], predict(m, X)[0])
    assert back.train_fingerprint == m.train_fingerprint


def timed(X, y):
    d0 = dt.date(2020, 1, 1)
    ids = [f"{i:064x}" for i in range(len(y))]
    samples = [TimestampedSample(s, int(l), d0 + dt.timedelta(days=i), "uploadDate") for i, (s, l) in enumerate(zip(ids, y))]
    return ids, samples


def test_grid_table_shape_and_choice(tmp_path):
    X, y = blobs(10, n=300)
    ids, samples = timed(X, y)
    plan = time_folds(samples, 3)
    res = grid_search(X, y, ids, plan, grid=(0.01, 0.1, 1.0, 10.0, 100.0))
    assert len(res.table) == 15
    means = res.mean_f1()
    assert res.best_C == max(sorted(means), key=lambda c: (means[c], -c))
    assert res.best.C == res.best_C and sorted(res.best.train_ids) == sorted(ids)
    res.write_table(tmp_path / "cv.csv")
    assert len((tmp_path / "cv.csv").read_text().splitlines()) == 16


def test_single_value_grid():
    X, y = blobs(11, n=120)
    ids, samples = timed(X, y)
    res = grid_search(X, y, ids, time_folds(samples, 2), grid=(3.0,))
    assert res.best_C == 3.0 and len(res.table) == 2


def test_ties_go_to_smaller_C():
    # perfectly separable with margin: every C scores F1 = 1 on every fold
    rng = np.random.default_rng(12)
    y = np.tile([0, 1], 60)
    X = np.c_[np.where(y == 1, 5.0, -5.0) + rng.normal(scale=0.1, size=120), rng.normal(size=120)]
    ids, samples = timed(X, y)
    res = grid_search(X, y, ids, time_folds(samples, 3), grid=(10.0, 1.0, 0.1))
    assert set(res.mean_f1().values()) == {1.0}
    assert res.best_C == 0.1
