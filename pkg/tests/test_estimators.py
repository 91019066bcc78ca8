import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gpinv.data import gaussian_dataset, synthetic_corpus
from gpinv.estimators import DegradationFlow, GenerativePseudoinverse
from gpinv.numerics import ContractError

FAST = dict(matrix="0.5,0.5", n_layers=4, hidden=8, n_iter=50, batch_size=64)


@pytest.fixture(scope="module")
def fitted():
    X = gaussian_dataset(2000, 2)
    return GenerativePseudoinverse(**FAST, T=20, denoiser_hidden=8, ddpm_iter=50,
                                   ddpm_batch_size=64).fit(X), X


def test_params_roundtrip_and_clone():
    est = DegradationFlow(sigma=0.1, n_layers=4)
    params = est.get_params()
    assert params["sigma"] == 0.1 and params["n_layers"] == 4
    c = clone(est)
    assert c.get_params() == params and c is not est
    est.set_params(hidden=16)
    assert est.hidden == 16
    assert "ddpm_iter" in GenerativePseudoinverse().get_params()


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        DegradationFlow().transform(np.zeros((2, 2)))
    with pytest.raises(NotFittedError):
        GenerativePseudoinverse().predict(np.zeros((2, 1)))


def test_transform_roundtrip(fitted):
    est, X = fitted
    Xt = est.transform(X[:100])
    assert Xt.shape == (100, 2)
    assert np.abs(est.inverse_transform(Xt) - X[:100]).max() < 1e-4
    Y, Z = est.encode(X[:5])
    assert Y.shape == (5, 1) and Z.shape == (5, 1)
    assert np.allclose(est.decode(Y, Z), X[:5], atol=1e-4)
    assert est.n_features_in_ == 2
    assert est.degrade(X[:3]).shape == (3, 1)


def test_predict_and_score(fitted):
    est, X = fitted
    Y = est.degrade(X[:8])
    xs = est.predict(Y)
    assert xs.shape == (8, 2)
    assert np.array_equal(xs, est.predict(Y))
    assert est.score(X[:8]) <= 0


def test_input_validation(fitted):
    est, _ = fitted
    with pytest.raises(ContractError):
        est.transform(np.zeros((3, 5)))
    with pytest.raises(ContractError):
        est.transform(np.array([[np.nan, 1.0]]))
    with pytest.raises(ContractError):
        est.transform(np.zeros(4))
    with pytest.raises(ContractError):
        est.predict(np.zeros((2, 3)))
    with pytest.raises(ContractError):
        DegradationFlow(**FAST).fit(np.zeros((0, 2)))


def test_image_flow_requires_uint8_and_fits():
    imgs = synthetic_corpus(8, 0, size=16)
    est = DegradationFlow(degradation="bicubic-downsample", scale=4, n_layers=2, hidden=8, n_iter=3,
                          batch_size=4)
    with pytest.raises(ContractError):
        est.fit(imgs.astype(np.float32) / 255)
    est.fit(imgs)
    Xt = est.transform(imgs[:2])
    assert Xt.shape == (2, 256)
    back = est.inverse_transform(Xt)
    assert back.shape == (2, 1, 16, 16)
