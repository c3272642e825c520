import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pointmf import MeanFlowPointGenerator
from pointmf.data import make_splits, sample_batch

SMALL = dict(hidden=16, blocks=2, heads=2, ctx_tokens=3, pma_dim=16, pma_heads=2, n_steps=4, batch_size=4,
             warmup_steps=2)


@pytest.fixture(scope="module")
def data():
    return sample_batch(make_splits(6, 1).train, 12, np.random.default_rng(0))


@pytest.fixture(scope="module")
def fitted(data):
    y, X = data
    return MeanFlowPointGenerator(**SMALL).fit(X, y)


def test_params_round_trip_through_clone():
    est = MeanFlowPointGenerator(**SMALL)
    assert est.get_params()["hidden"] == 16
    twin = clone(est).set_params(lr=5e-4)
    assert twin.lr == 5e-4 and est.lr == 1e-3


def test_fit_predict_shapes(fitted, data):
    y, X = data
    assert len(fitted.history_) == 4 and fitted.n_features_in_ == 13
    assert fitted.predict(X).shape == (6, 12, 3)
    assert fitted.sample(X[:2], steps=3, n_points=20).shape == (2, 20, 3)
    assert fitted.sample(X[:1], steps=2, method="fm_euler").shape == (1, 12, 3)
    assert np.array_equal(fitted.predict(X), fitted.predict(X))
    assert fitted.score(X, y) < 0


def test_fit_is_reproducible(data, fitted):
    y, X = data
    again = MeanFlowPointGenerator(**SMALL).fit(X, y)
    assert np.array_equal(again.predict(X), fitted.predict(X))


def test_unfitted_estimator_refuses_to_predict(data):
    with pytest.raises(NotFittedError):
        MeanFlowPointGenerator(**SMALL).predict(data[1])


def test_input_validation(fitted, data):
    y, X = data
    with pytest.raises(ValueError):
        fitted.predict(X[:, :5])
    with pytest.raises(ValueError):
        fitted.predict(np.full_like(X, np.nan))
    with pytest.raises(ValueError):
        MeanFlowPointGenerator(**SMALL).fit(X[:3], y)
    with pytest.raises(ValueError):
        MeanFlowPointGenerator(**SMALL).fit(X, y[..., :2])
    with pytest.raises(ValueError):
        fitted.sample(X, steps=0)
    with pytest.raises(ValueError):
        fitted.sample(X, seed=-1)
    with pytest.raises(ValueError):
        fitted.sample(X, method="heun")


def test_checkpoint_round_trip(fitted, data, tmp_path):
    path = tmp_path / "est.ckpt"
    fitted.save(path)
    loaded = MeanFlowPointGenerator.from_checkpoint(path)
    assert loaded.get_params() == fitted.get_params()
    np.testing.assert_array_equal(loaded.predict(data[1]), fitted.predict(data[1]))
