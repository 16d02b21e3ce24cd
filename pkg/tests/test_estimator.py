import numpy as np
import pytest
from sklearn.base import clone

from patchattr.core import Dataset
from patchattr.estimator import NotFittedError, PatchInfluenceAttributor, RawPixelAttributor, check_images
from patchattr.exceptions import ConfigurationError, DataFormatError, ShapeError

SMALL = dict(timesteps=(100, 300), patch_sizes=3, low_patch_sizes=4, k=6)


def test_params_round_trip():
    est = PatchInfluenceAttributor(k=7, gammas=0.5)
    params = est.get_params()
    assert params["k"] == 7 and params["gammas"] == 0.5 and params["timesteps"] == (100, 200, 300, 400, 500)
    other = clone(est).set_params(k=9)
    assert other.k == 9 and est.k == 7


def test_fit_transform(rng):
    X = rng.uniform(-1, 1, (6, 3, 8, 8))
    est = PatchInfluenceAttributor(noise_mode="zero", gammas=1.0, **SMALL).fit(X, ids=list("abcdef"))
    scores = est.transform(X[[3, 0]])
    assert scores.shape == (2, 6)
    np.testing.assert_array_equal(scores.argmax(axis=1), [3, 0])
    m = est.attribute(X[3], ids=["query"])
    assert m.query_ids == ("query",) and m.train_ids == tuple("abcdef")
    assert est.n_features_in_ == 3 * 64


def test_workers_do_not_change_result(rng):
    X = rng.uniform(-1, 1, (20, 3, 8, 8))
    a = PatchInfluenceAttributor(**SMALL, chunk_size=3).fit(X).transform(X[:2])
    b = PatchInfluenceAttributor(**SMALL, chunk_size=3, n_jobs=4).fit(X).transform(X[:2])
    assert a.tobytes() == b.tobytes()


def test_not_fitted_and_validation(rng):
    with pytest.raises(NotFittedError):
        PatchInfluenceAttributor().transform(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ConfigurationError):
        PatchInfluenceAttributor(k=0).fit(np.zeros((2, 1, 4, 4)))
    with pytest.raises(ConfigurationError):
        PatchInfluenceAttributor(n_jobs=0).fit(np.zeros((2, 1, 4, 4)))
    est = PatchInfluenceAttributor(**SMALL).fit(rng.uniform(-1, 1, (2, 3, 8, 8)))
    with pytest.raises(ShapeError):
        est.transform(np.zeros((1, 3, 4, 4)))
    with pytest.raises(DataFormatError):
        est.transform(np.full((1, 3, 8, 8), 2.0))


def test_check_images():
    ds = check_images(np.zeros((1, 2, 2)))
    assert isinstance(ds, Dataset) and len(ds) == 1
    with pytest.raises(ShapeError):
        check_images(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        check_images(np.zeros((0, 1, 2, 2)))
    assert check_images(ds, ids=["z"]).ids == ("z",)


def test_raw_pixel_estimator(rng):
    X = rng.uniform(-1, 1, (5, 3, 4, 4))
    est = RawPixelAttributor().fit(X)
    s = est.transform(X[[1]])
    assert s.argmax() == 1 and s[0, 1] == pytest.approx(1.0)
    np.testing.assert_allclose(RawPixelAttributor("dot").fit(X).transform(X[[1]])[0], X.reshape(5, -1) @ X[1].ravel())
    with pytest.raises(ConfigurationError):
        RawPixelAttributor("l1").fit(X)
