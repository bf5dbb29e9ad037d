import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

import facetune
from conftest import TINY_ARCH
from facetune import autodiff as ad
from facetune.eval import reconstruct
from facetune.exceptions import ConfigError, ShapeError
from facetune.estimator import FaceTuner, check_mesh_batch, check_style_labels


@pytest.fixture(scope="module")
def data(tiny_dataset):
    X, _, S = tiny_dataset.subset("train")
    y = np.array(tiny_dataset.style_labels)[S]
    return X, y, tiny_dataset.faces


def _est(faces, **kw):
    kw = {"epochs": 1, "batch_size": 4, "precision": 64, "architecture": TINY_ARCH, **kw}
    return FaceTuner(faces=faces, **kw)


@pytest.fixture(scope="module")
def fitted(data):
    X, y, faces = data
    with ad.default_dtype(np.float64):
        return _est(faces, neutral_label="neutral").fit(X, y)


def test_lazy_top_level_export():
    assert facetune.FaceTuner is FaceTuner
    with pytest.raises(AttributeError):
        facetune.nothing_here


def test_params_and_clone(data):
    _, _, faces = data
    est = _est(faces, lambda_adv=0.5)
    p = est.get_params()
    assert p["lambda_adv"] == 0.5 and p["architecture"] is TINY_ARCH
    twin = clone(est)
    assert twin.get_params()["lambda_adv"] == 0.5
    assert not hasattr(twin, "generator_")
    est.set_params(epochs=3)
    assert est.run_config().train.epochs == 3


def test_fit_attributes(fitted, data):
    X, _, _ = data
    assert fitted.classes_ == ["neutral", "expr01", "expr02"]
    assert fitted.n_features_in_ == X.shape[1] * 3
    assert fitted.topology_.level_sizes == [162, 41, 11]
    assert fitted.trainer_.state.step == fitted.trainer_.steps_per_epoch


def test_transform_round_trip(fitted, data):
    X, _, _ = data
    Z = fitted.transform(X[:3])
    assert Z.shape == (3, TINY_ARCH["content_dim"] + TINY_ARCH["style_dim"])
    np.testing.assert_allclose(fitted.inverse_transform(Z), fitted.reconstruct(X[:3]), atol=1e-12)
    np.testing.assert_array_equal(fitted.reconstruct(X[:3]),
                                  reconstruct(fitted.generator_, X[:3]))


def test_translate_broadcasts_single_style(fitted, data):
    X, _, _ = data
    one = fitted.translate(X[:3], X[4])
    each = fitted.translate(X[:3], np.repeat(X[4:5], 3, axis=0))
    np.testing.assert_array_equal(one, each)
    np.testing.assert_array_equal(fitted.neutralize(X[:3], X[4]), one)
    np.testing.assert_array_equal(fitted.translate(X[:2], X[:2]), fitted.reconstruct(X[:2]))


def test_flat_rows_accepted(fitted, data):
    X, _, _ = data
    np.testing.assert_array_equal(fitted.transform(X[:2].reshape(2, -1)), fitted.transform(X[:2]))


def test_score_is_negative_rec_error(fitted, data):
    X, _, _ = data
    r = fitted.reconstruct(X)
    want = -np.mean(np.linalg.norm(r - X, axis=-1))
    assert fitted.score(X) == pytest.approx(want, rel=1e-12)
    assert fitted.score(X) < 0


def test_fit_is_reproducible(data, fitted):
    X, y, faces = data
    again = _est(faces, neutral_label="neutral").fit(X, y)
    np.testing.assert_array_equal(again.transform(X[:2]), fitted.transform(X[:2]))


def test_not_fitted(data):
    X, _, faces = data
    with pytest.raises(NotFittedError):
        _est(faces).transform(X[:1])


def test_fit_needs_faces(data):
    X, y, _ = data
    with pytest.raises(ConfigError, match="faces"):
        FaceTuner().fit(X, y)


def test_input_checks(fitted, data):
    X, _, _ = data
    with pytest.raises(ShapeError):
        fitted.transform(X[:, :-1])
    bad = X[:1].copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        fitted.transform(bad)
    with pytest.raises(ShapeError):
        fitted.inverse_transform(np.zeros((1, 3)))


def test_check_mesh_batch_forms():
    v = np.zeros((5, 3))
    assert check_mesh_batch(v, 5).shape == (1, 5, 3)
    assert check_mesh_batch(np.zeros((2, 15))).shape == (2, 5, 3)
    with pytest.raises(ShapeError):
        check_mesh_batch(np.zeros((2, 14)))
    with pytest.raises(ShapeError):
        check_mesh_batch(np.zeros((2, 5, 2)))


def test_style_label_order():
    idx, classes = check_style_labels([10, 2, 0, 2], 4, neutral_label=0)
    assert classes == [0, 2, 10]
    np.testing.assert_array_equal(idx, [2, 1, 0, 1])
    _, classes = check_style_labels(["smile", "neutral", "angry"], 3)
    assert classes == ["angry", "neutral", "smile"]
    with pytest.raises(ConfigError, match="neutral label"):
        check_style_labels(["smile"], 1, neutral_label="neutral")
    with pytest.raises(ShapeError):
        check_style_labels([0, 1], 3)
