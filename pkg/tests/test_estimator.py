import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from embvc import VoiceConverter
from embvc.errors import UnknownSpeaker
from embvc.nets import miniature_arch, param_checksum


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    rng = np.random.default_rng(0)
    X = [rng.normal(i, 1, (8, 30)) for i in range(2) for _ in range(3)]
    y = ["a"] * 3 + ["b"] * 3
    vc = VoiceConverter(arch=miniature_arch(), n_steps=3, batch_size=2,
                        work_dir=tmp_path_factory.mktemp("est"))
    return vc.fit(X, y), X


def test_params_and_clone():
    vc = VoiceConverter(n_steps=7, lr_g=3e-4)
    assert clone(vc).get_params() == vc.get_params()
    assert vc.get_params()["n_steps"] == 7


def test_fit_state(fitted):
    vc, _ = fitted
    assert len(vc.history_) == 3 and vc.n_features_in_ == 8
    assert set(vc.profiles_) == {"a", "b"} and vc.registry_.N == 2


def test_transform_shapes(fitted):
    vc, X = fitted
    assert vc.transform(X[0], source="a", target="b").shape == X[0].shape
    out = vc.transform(X[:2], source="a", target="b")
    assert [o.shape for o in out] == [x.shape for x in X[:2]]


def test_unseen_profile_leaves_weights(fitted):
    vc, X = fitted
    before = param_checksum(vc.model_)
    new = vc.profile([np.full((8, 20), 3.0) + np.arange(20)], speaker_id="c")
    assert vc.transform(X[0], source="a", target=new).shape == X[0].shape
    assert param_checksum(vc.model_) == before
    assert vc.embed([X[:3], X[3:]]).shape == (2, 4)


def test_errors(fitted):
    vc, X = fitted
    with pytest.raises(UnknownSpeaker):
        vc.transform(X[0], source="a", target="zzz")
    with pytest.raises(ValueError):
        vc.transform(X[0], source="a")
    with pytest.raises(NotFittedError):
        VoiceConverter().transform(X[0], source="a", target="b")
    with pytest.raises(ValueError):
        VoiceConverter(arch=miniature_arch()).fit(X, ["a"])
