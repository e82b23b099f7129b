import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from otalign.estimator import OTAlignClassifier

FAST = dict(latent_dim=8, batch_size=16, pretrain_epochs=30, max_epochs=3, random_state=2)


@pytest.fixture(scope="module")
def arrays(small_benchmark):
    src, tu, te = small_benchmark
    labels = np.array(["a", "b", "c", "d"])[src.labels]
    return src.features, labels, tu.features, te


def test_params_round_trip():
    est = OTAlignClassifier(method="mmd", alpha=0.01)
    assert est.get_params()["method"] == "mmd"
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(beta=2.0)
    assert est.beta == 2.0


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        OTAlignClassifier().predict(np.zeros((2, 3)))


def test_fit_predict_transform(arrays, quiet_sinkhorn):
    X, y, Xt, te = arrays
    est = OTAlignClassifier(**FAST).fit(X, y, X_target=Xt)
    assert list(est.classes_) == ["a", "b", "c", "d"]
    assert est.n_features_in_ == X.shape[1]
    assert est.history_ is not None and len(est.history_) >= 1
    P = est.predict_proba(Xt)
    assert P.shape == (Xt.shape[0], 4)
    np.testing.assert_allclose(P.sum(1), 1.0, atol=1e-12)
    assert set(est.predict(Xt)) <= set(est.classes_)
    Z = est.transform(Xt)
    np.testing.assert_allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-12)
    assert est.score(X, y) >= 0.9


def test_source_only_fit_skips_adaptation(arrays):
    X, y, Xt, _ = arrays
    est = OTAlignClassifier(**FAST).fit(X, y)
    assert est.history_ is None


def test_refit_is_deterministic(arrays, quiet_sinkhorn):
    X, y, Xt, _ = arrays
    a = OTAlignClassifier(**FAST).fit(X, y, X_target=Xt).predict_proba(Xt)
    b = clone(OTAlignClassifier(**FAST)).fit(X, y, X_target=Xt).predict_proba(Xt)
    assert np.array_equal(a, b)


def test_feature_count_checked(arrays):
    X, y, _, _ = arrays
    est = OTAlignClassifier(**FAST).fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:, :2])
    with pytest.raises(ValueError):
        OTAlignClassifier(**FAST).fit(X, y, X_target=X[:, :2])
