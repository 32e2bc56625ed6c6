import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from msdg.estimator import MSCDGClassifier, split_modalities

SMALL = dict(epochs=2, t_pre=0, t_adv=1, batch_size=8, d_spa=4, d_c=6, d_i=8, adv_layers=2, adv_width=3)


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(30, 3, 3, 6))
    y = np.array(["water", "road", "tree"])[np.arange(30) % 3]
    X[..., 0] = np.clip(X[..., 0] + 0.3 * (np.arange(30) % 3)[:, None, None], 0, 1)
    return MSCDGClassifier(n_channels_1=4, **SMALL).fit(X, y), X, y


def test_predict_returns_original_labels(fitted):
    clf, X, y = fitted
    assert set(clf.predict(X)) <= set(y)
    assert list(clf.classes_) == ["road", "tree", "water"]


def test_proba_and_transform(fitted):
    clf, X, _ = fitted
    p = clf.predict_proba(X)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)
    assert clf.transform(X).shape == (30, 12)
    np.testing.assert_array_equal(clf.classes_[p.argmax(1)], clf.predict(X))


def test_pair_input_matches_stacked(fitted):
    clf, X, _ = fitted
    np.testing.assert_array_equal(clf.predict((X[..., :4], X[..., 4:])), clf.predict(X))


def test_params_round_trip():
    clf = MSCDGClassifier(n_channels_1=4, alpha2=0.3)
    assert clone(clf).get_params() == clf.get_params()
    assert clf.set_params(epochs=5).epochs == 5


def test_validation():
    with pytest.raises(NotFittedError):
        MSCDGClassifier(n_channels_1=2).predict(np.zeros((1, 3, 3, 4)))
    with pytest.raises(ValueError, match="n_channels_1"):
        split_modalities(np.zeros((2, 3, 3, 4)), None)
    with pytest.raises(ValueError, match="square"):
        split_modalities((np.zeros((2, 3, 4, 2)), np.zeros((2, 3, 4, 1))), None)
    with pytest.raises(ValueError):
        MSCDGClassifier(n_channels_1=2, **SMALL).fit(np.zeros((4, 3, 3, 4)), [0, 0, 0, 0])
    with pytest.raises(ValueError, match="labels"):
        MSCDGClassifier(n_channels_1=2, **SMALL).fit(np.zeros((4, 3, 3, 4)), [0, 1, 0])


def test_channel_count_checked_at_predict(fitted):
    clf, X, _ = fitted
    with pytest.raises(ValueError, match="channels"):
        clf.predict((X[..., :3], X[..., 3:]))
