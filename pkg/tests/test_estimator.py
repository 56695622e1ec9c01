import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from biresnet.estimator import BiResNetClassifier, ChannelStandardizer, Downsampler, NoiseInjector
from biresnet.nncore import ShapeError
from biresnet.validation import check_labels, check_positive, check_signals


def bump_data(n_per_class=24, T=40, seed=0):
    g = np.random.default_rng(seed)
    t = np.arange(T)
    X, y = [], []
    for cls, name in enumerate(("low", "high")):
        for _ in range(n_per_class):
            x = 0.3 * g.standard_normal((2, T))
            x[cls] += 2.0 * np.exp(-0.5 * ((t - g.uniform(12, 28)) / 3.0) ** 2)
            X.append(x)
            y.append(name)
    return np.asarray(X), np.asarray(y)


def test_check_signals():
    assert check_signals(np.zeros((4, 10))).shape == (1, 4, 10)
    with pytest.raises(ShapeError):
        check_signals(np.zeros(5))
    with pytest.raises(ShapeError):
        check_signals(np.zeros((2, 3, 5)), n_channels=8)
    with pytest.raises(ValueError):
        check_signals(np.full((1, 2, 3), np.nan))
    with pytest.raises(TypeError):
        check_signals(np.array([[["a"]]]))
    with pytest.raises(ShapeError):
        check_labels([0, 1], n_samples=3)
    with pytest.raises(ValueError):
        check_positive("x", 0)
    assert check_positive("x", 0, allow_zero=True) == 0


def test_classifier_fit_predict():
    X, y = bump_data()
    clf = BiResNetClassifier(stages=(8,), blocks_per_stage=1, epochs=15, batch_size=8, validation_fraction=0.25)
    clf.fit(X, y)
    assert list(clf.classes_) == ["high", "low"]
    Xt, yt = bump_data(8, seed=5)
    proba = clf.predict_proba(Xt)
    np.testing.assert_allclose(proba.sum(1), 1, atol=1e-6)
    assert clf.score(Xt, yt) >= 0.9
    acc, cm = clf.confusion(Xt, yt)
    assert cm.shape == (2, 2) and cm.sum() == 16
    assert len(clf.history_) == 15


def test_classifier_params_and_validation():
    clf = BiResNetClassifier(epochs=3)
    assert clone(clf).get_params()["epochs"] == 3
    with pytest.raises(Exception):
        clf.predict(np.zeros((1, 8, 10)))
    X, y = bump_data(4)
    with pytest.raises(ValueError):
        BiResNetClassifier(stages=(4,), epochs=1, batch_size=2).fit(X, y, validation_data=(X, np.full(len(y), "x")))


def test_transformer_pipeline():
    g = np.random.default_rng(0)
    X = g.standard_normal((6, 3, 40)) * 5 + 2
    pipe = make_pipeline(Downsampler(2), NoiseInjector(None), ChannelStandardizer())
    out = pipe.fit_transform(X)
    assert out.shape == (6, 3, 20)
    np.testing.assert_allclose(out.mean(axis=(0, 2)), 0, atol=1e-12)
    std = pipe[-1]
    np.testing.assert_allclose(std.inverse_transform(out), X[:, :, ::2])
    noisy = NoiseInjector(0.0, random_state=1).fit(X).transform(X)
    assert not np.array_equal(noisy, X)
    assert np.array_equal(noisy, NoiseInjector(0.0, random_state=1).fit(X).transform(X))
    with pytest.raises(Exception):
        Downsampler(3).fit(X)
