import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from xinv import SourceInvariantClassifier
from xinv import model


def make_data(n=24, size=16, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, size, size))
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    sources = np.arange(n) % 2
    return X, y, sources


def fast_clf(**kw):
    base = dict(epochs=2, batch_size=8, lr=0.01, seed=1)
    base.update(kw)
    return SourceInvariantClassifier(**base)


def test_get_params_roundtrip_and_clone():
    clf = fast_clf(lam=0.5, mode="alternating")
    params = clf.get_params()
    assert params["lam"] == 0.5 and params["mode"] == "alternating"
    other = clone(clf)
    assert other.get_params() == params


def test_fit_predict_shapes():
    X, y, sources = make_data()
    clf = fast_clf().fit(X, y, sources=sources)
    proba = clf.predict_proba(X)
    assert proba.shape == (len(X), 2)
    assert np.allclose(proba.sum(axis=1), 1.0)
    pred = clf.predict(X)
    assert set(np.unique(pred)) <= {0, 1}
    assert np.array_equal(clf.classes_, [0, 1])
    assert clf.n_sources_ == 2


def test_decision_function_matches_positive_proba():
    X, y, sources = make_data(seed=2)
    clf = fast_clf().fit(X, y, sources=sources)
    assert np.array_equal(clf.decision_function(X), clf.predict_proba(X)[:, 1])


def test_transform_returns_latent_features():
    X, y, sources = make_data(seed=3)
    clf = fast_clf().fit(X, y, sources=sources)
    feats = clf.transform(X)
    assert feats.shape == (len(X), model.FEATURE_DIM)


def test_baseline_mode_without_sources():
    X, y, _ = make_data(seed=4)
    clf = fast_clf(mode="baseline").fit(X, y)
    assert clf.predict(X).shape == (len(X),)


def test_adversarial_mode_requires_sources():
    X, y, _ = make_data()
    with pytest.raises(ValueError, match="sources"):
        fast_clf().fit(X, y)


def test_rejects_nonbinary_labels():
    X, y, sources = make_data()
    with pytest.raises(ValueError, match="binary"):
        fast_clf().fit(X, y + 1, sources=sources)


def test_rejects_length_mismatch():
    X, y, sources = make_data()
    with pytest.raises(ValueError):
        fast_clf().fit(X, y[:-1], sources=sources)
    with pytest.raises(ValueError):
        fast_clf().fit(X, y, sources=sources[:-1])


def test_rejects_nonfinite_images():
    X, y, sources = make_data()
    X[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        fast_clf().fit(X, y, sources=sources)


def test_predict_before_fit_raises():
    X, _, _ = make_data()
    with pytest.raises(NotFittedError):
        fast_clf().predict(X)


def test_fit_is_seed_deterministic():
    X, y, sources = make_data(seed=5)
    a = fast_clf(seed=7).fit(X, y, sources=sources).predict_proba(X)
    b = fast_clf(seed=7).fit(X, y, sources=sources).predict_proba(X)
    c = fast_clf(seed=8).fit(X, y, sources=sources).predict_proba(X)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_history_records_every_epoch():
    X, y, sources = make_data(seed=6)
    clf = fast_clf(epochs=3).fit(X, y, sources=sources)
    assert [r["epoch"] for r in clf.history_] == [0, 1, 2]
