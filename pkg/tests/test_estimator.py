import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sarforge import SarUNetRegressor, check_raster_batch, check_raster_pair


def data(n=6, size=16, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, size, size)).astype(np.float32)
    return x, 0.5 * x


def test_check_raster_batch_shapes():
    assert check_raster_batch(np.ones((8, 8))).shape == (1, 8, 8)
    assert check_raster_batch(np.ones((2, 8, 8, 1))).shape == (2, 8, 8)
    assert check_raster_batch([[[1, 2], [3, 4]]]).dtype == np.float32
    with pytest.raises(ValueError):
        check_raster_batch(np.ones(5))
    with pytest.raises(ValueError):
        check_raster_batch(np.full((1, 4, 4), np.nan))
    with pytest.raises(ValueError, match="differ"):
        check_raster_pair(np.ones((2, 4, 4)), np.ones((2, 4, 5)))


def test_get_params_and_clone():
    est = SarUNetRegressor(depth=2, base_channels=4, preset="sgd-3t", epochs=3, seed=5)
    p = est.get_params()
    assert p == dict(depth=2, base_channels=4, preset="sgd-3t", epochs=3, seed=5, keep_best=True)
    assert clone(est).get_params() == p
    assert est.set_params(seed=9).seed == 9


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        SarUNetRegressor().predict(np.ones((1, 16, 16)))


def test_fit_predict_score_and_reload(tmp_path):
    x, y = data()
    est = SarUNetRegressor(depth=2, base_channels=4, epochs=2, seed=1).fit(x[:4], y[:4], x[4:], y[4:])
    assert len(est.history_) == 2
    pred = est.predict(x)
    assert pred.shape == x.shape
    s = est.score(x, y)
    assert -1 <= s <= 1
    back = SarUNetRegressor.from_checkpoint(est.save(tmp_path / "m.sarw"))
    assert back.get_params()["depth"] == 2
    assert back.predict(x).tobytes() == pred.tobytes()


def test_fit_is_reproducible():
    x, y = data()
    a = SarUNetRegressor(depth=2, base_channels=2, epochs=1, seed=3).fit(x, y).predict(x)
    b = SarUNetRegressor(depth=2, base_channels=2, epochs=1, seed=3).fit(x, y).predict(x)
    assert a.tobytes() == b.tobytes()


def test_fit_rejects_indivisible_rasters():
    x, y = data(size=12)
    with pytest.raises(ValueError, match="divisible"):
        SarUNetRegressor(depth=3, epochs=1).fit(x, y)
