import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from asymdistill.data import synth_dataset
from asymdistill.estimators import JointEmbeddingSSL, LinearProbe, SupervisedClassifier
from asymdistill.exceptions import ValidationError
from asymdistill.model import param_checksum


@pytest.fixture(scope="module")
def data():
    return synth_dataset(64, seed=4, img_px=32)


@pytest.fixture(scope="module")
def fitted(data):
    est = JointEmbeddingSSL(encoder="desk_cnn_tiny", expander_width=32, epochs=1, batch_size=32, random_state=2)
    return est.fit(data)


def test_params_round_trip_through_clone():
    est = JointEmbeddingSSL(loss="simclr", asymmetric=False, epochs=3, random_state=9)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.to_config().config_hash() == est.to_config().config_hash()
    probe = LinearProbe(epochs=5, lr=1e-2)
    assert clone(probe).get_params() == probe.get_params()
    assert clone(SupervisedClassifier(task="cell")).get_params()["task"] == "cell"


def test_ssl_transform_shape_and_views(fitted, data):
    assert fitted.transform(data).shape == (64, 64)
    assert fitted.transform(data.dense, view="dense").shape == (64, 64)
    assert fitted.encoder_for("sparse") is fitted.model_.branch_a.encoder
    assert fitted.encoder_for("dense") is fitted.model_.branch_b.encoder
    with pytest.raises(ValidationError):
        JointEmbeddingSSL().fit(data.dense)
    with pytest.raises(NotFittedError):
        JointEmbeddingSSL().transform(data)


def test_ssl_save_load(fitted, data, tmp_path):
    back = JointEmbeddingSSL.load(fitted.save(tmp_path / "m.ckpt"))
    assert back.get_params() == fitted.get_params()
    np.testing.assert_array_equal(back.transform(data), fitted.transform(data))


def test_probe_string_labels_and_freeze(fitted, data):
    names = np.array(["adipose", "mucosa", "stroma", "tumour"])[data.tissue]
    before = param_checksum(fitted.model_)
    probe = LinearProbe(encoder=fitted, view="sparse", epochs=2).fit(data, names)
    assert param_checksum(fitted.model_) == before
    assert list(probe.classes_) == ["adipose", "mucosa", "stroma", "tumour"]
    assert set(probe.predict(data)) <= set(probe.classes_)
    proba = probe.predict_proba(data)
    np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-6)
    assert 0.0 <= probe.score(data, names) <= 1.0


def test_probe_on_embeddings():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(-3, 1, (40, 4)), rng.normal(3, 1, (40, 4))])
    y = np.repeat([3, 7], 40)
    probe = LinearProbe(epochs=30, lr=1e-2).fit(X, y)
    assert probe.score(X, y) > 0.95
    with pytest.raises(ValidationError):
        probe.predict(np.full((2, 4), np.nan))


def test_supervised_on_arrays(data):
    clf = SupervisedClassifier(encoder="desk_cnn_tiny", epochs=1, batch_size=16)
    clf.fit(data.dense, data.tissue)
    assert clf.classes_.tolist() == [0, 1, 2, 3]
    assert clf.predict(data.dense).shape == (64,)
    assert clf.transform(data.dense).shape == (64, 64)
    with pytest.raises(ValidationError):
        SupervisedClassifier().fit(data.dense)
    with pytest.raises(ValidationError):
        SupervisedClassifier().fit(data, np.zeros(3))
