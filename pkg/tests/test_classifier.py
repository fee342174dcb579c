import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ranslice.classifier import (CLASSES, CTRL, N_FEATURES, VOLUME_FEATURES, ClassifierError, CnnHyperparams,
                                 CnnModel, Dataset, NormStats, Window, apply_normalizer, balance, build_windows,
                                 classify, evaluate, fit_normalizer, generate_dataset, itr_filter, load_dataset,
                                 load_model, metrics, save_model, split_streams, train_cnn, windows_of)
from ranslice.env import EnvConfig


def busy_stream(n, seed=0):
    return np.random.default_rng(seed).uniform(1, 5, (n, N_FEATURES))


def bursty_stream(n=480, active=0.1, seed=0):
    rng = np.random.default_rng(seed)
    X = busy_stream(n, seed)
    idle = rng.random(n) >= active
    X[np.ix_(idle, list(VOLUME_FEATURES))] = 0.0
    return X


def test_window_counts():
    assert len(build_windows(busy_stream(64), 64, 0)) == 1
    assert len(build_windows(busy_stream(480), 64, 0)) == 417
    assert build_windows(busy_stream(10), 16, 0) == []
    with pytest.raises(ClassifierError):
        build_windows(busy_stream(10), 0, 0)


@given(st.integers(0, 120), st.sampled_from([4, 8, 16, 32, 64]))
def test_window_count_formula(n, T):
    ws = build_windows(busy_stream(n), T, 1)
    assert len(ws) == max(0, n - T + 1)
    assert all(w.x.shape == (T, N_FEATURES) for w in ws)


def test_idle_stream_is_ctrl():
    ws = build_windows(np.zeros((40, N_FEATURES)), 8, 2)
    assert all(w.label == CTRL and w.source == 2 for w in ws)
    # one active period makes every window covering it non-ctrl
    X = np.zeros((40, N_FEATURES))
    X[20, VOLUME_FEATURES[0]] = 3.0
    labels = [w.label for w in build_windows(X, 8, 2)]
    assert labels[13:21] == [2] * 8 and labels.count(2) == 8


def test_normalizer_examples():
    st_ = NormStats(np.array([0.0, 5.0]), np.array([10.0, 5.0]))
    np.testing.assert_allclose(st_.apply(np.array([[2.5, 5.0], [12.0, 7.0], [-1.0, 5.0]])),
                               [[0.25, 0.0], [1.0, 0.0], [0.0, 0.0]])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_normalized_windows_in_unit_cube(seed):
    rng = np.random.default_rng(seed)
    train = build_windows(rng.normal(0, 10, (30, N_FEATURES)), 4, 0)
    test = build_windows(rng.normal(0, 30, (30, N_FEATURES)), 4, 0)
    norm = fit_normalizer(train)
    for w in test:
        x = apply_normalizer(norm, w).x
        assert np.all((0 <= x) & (x <= 1))


def test_itr_examples():
    busy = build_windows(busy_stream(100), 4, 0)
    assert itr_filter(busy, 0.0) == busy
    assert itr_filter(build_windows(np.zeros((100, N_FEATURES)), 4, 0)) == []
    X = bursty_stream()
    removed = {T: len(build_windows(X, T, 2)) - len(itr_filter(build_windows(X, T, 2))) for T in (4, 64)}
    assert removed[4] > removed[64]


def _separable(n=200, T=8, seed=0):
    rng = np.random.default_rng(seed)
    ws = []
    for i in range(n):
        c = i % 2
        x = rng.uniform(0, 0.4, (T, N_FEATURES)) + 0.5 * c
        ws.append(Window(x, c, c, i))
    return ws


SMALL = CnnHyperparams(hidden=32, kernels=4, max_epochs=50, dtype="float64")


def test_separable_classes_are_learned():
    ws = _separable()
    model = train_cnn(ws, SMALL, seed=1)
    X = np.stack([w.x for w in ws])
    y = np.array([w.label for w in ws])
    assert np.mean(model.predict(X) == y) >= 0.99
    probs = np.exp(model.log_proba(X))[np.arange(len(y)), y]
    assert np.mean(probs > 0.5) >= 0.95
    assert len(model.history) <= 50


def test_training_is_deterministic():
    ws = _separable(60)
    hp = CnnHyperparams(hidden=16, kernels=3, max_epochs=3)
    a, b = train_cnn(ws, hp, seed=4), train_cnn(ws, hp, seed=4)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_single_class_rejected():
    ws = [w._replace(label=0) for w in _separable(20)]
    with pytest.raises(ClassifierError):
        train_cnn(ws, SMALL)


def test_cnn_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    model = CnnModel(8, seed=3, dtype="float64")
    X = rng.random((6, 8, N_FEATURES))
    y = rng.integers(0, 4, 6)
    _, grads = model.loss_and_grad(X, y)
    h = 1e-6
    for _ in range(20):
        k = str(rng.choice(list(model.params)))
        idx = tuple(int(rng.integers(n)) for n in model.params[k].shape)
        old = model.params[k][idx]
        model.params[k][idx] = old + h
        lp = model.loss_and_grad(X, y)[0]
        model.params[k][idx] = old - h
        lm = model.loss_and_grad(X, y)[0]
        model.params[k][idx] = old
        fd = (lp - lm) / (2 * h)
        assert abs(fd - grads[k][idx]) / max(abs(fd) + abs(grads[k][idx]), 1e-10) < 1e-4


def test_classify_outputs():
    model = CnnModel(8, hidden=16, seed=0)
    name, logp, dt = classify(model, busy_stream(8))
    assert name in CLASSES
    assert np.exp(logp).sum() == pytest.approx(1.0, abs=1e-6)
    assert dt < 0.25
    model.params["W2"][:] = 0
    model.params["b2"][:] = 0
    assert classify(model, busy_stream(8))[0] == CLASSES[0]
    with pytest.raises(ClassifierError):
        classify(model, busy_stream(9))


def test_metrics_examples():
    y = np.repeat(np.arange(4), 5)
    m = metrics(y, y)
    assert m["accuracy"] == 1.0
    assert np.array_equal(np.array(m["confusion"]), np.diag([5] * 4))
    assert metrics(y, np.zeros_like(y))["accuracy"] == 0.25


def test_evaluate_with_itr_on_empty_raises():
    model = CnnModel(4, hidden=8)
    ws = build_windows(np.zeros((10, N_FEATURES)), 4, 0)
    with pytest.raises(ClassifierError):
        evaluate(model, ws, with_itr=True)
    assert evaluate(model, ws)["n_windows"] == 7


def test_model_round_trip(tmp_path):
    ws = _separable(40)
    model = train_cnn(ws, CnnHyperparams(hidden=16, kernels=3, max_epochs=2), seed=0)
    model.norm = fit_normalizer(ws)
    save_model(model, tmp_path / "m.npz")
    back = load_model(tmp_path / "m.npz")
    X = np.stack([w.x for w in ws])
    assert np.array_equal(back.log_proba(X), model.log_proba(X))
    assert np.array_equal(back.norm.lo, model.norm.lo)
    assert back.optimizer.t == model.optimizer.t


def test_dataset_manifest_round_trip(small_library, tmp_path):
    ds = generate_dataset(2, 5, small_library, EnvConfig(), n_periods=20, out_dir=tmp_path)
    assert len(ds.streams) == 2 * len(CLASSES)
    back = load_dataset(tmp_path)
    assert [(n, c) for n, c, _ in back.streams] == [(n, c) for n, c, _ in ds.streams]
    for (_, _, a), (_, _, b) in zip(ds.streams, back.streams):
        np.testing.assert_allclose(a, b)
    ctrl = [X for _, c, X in ds.streams if c == CTRL]
    assert all(w.label == CTRL for X in ctrl for w in build_windows(X, 4, CTRL))
    with pytest.raises(ClassifierError):
        load_dataset(tmp_path / "missing")


def test_split_and_balance():
    ds = Dataset([(f"s{i}", i % 4, busy_stream(20, i)) for i in range(20)])
    train, test = split_streams(ds, 0.2, seed=0)
    assert len(test) == 4 and len(train) == 16
    assert not {n for n, _, _ in train} & {n for n, _, _ in test}
    ws = balance(windows_of(train, 4), 30, seed=0)
    counts = np.bincount([w.label for w in ws])
    assert counts.tolist() == [30] * 4
