import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from keyin import eval as ev
from keyin.datasets import gen_sbm
from keyin.estimators import KeyInKeyframes, RandomKeyframes, StaticKeyframes, SurpriseKeyframes, check_windows
from keyin.models import ModelConfig
from keyin.training import TrainConfig, Trainer, build_model, prepare_frames

C, T = 2, 6
TINY = ModelConfig(image_size=8, channels=1, N=2, J=4, T=T, C=C, embed_dim=8, hidden_dim=12, latent_dim=3,
                   inpaint_latent_dim=2, base_channels=4)


@pytest.fixture(scope="module")
def windows():
    ds = gen_sbm(10, 12, H=16, W=16, seed=6)
    cond, targets, truths = ev.held_out_windows(ds, C, T, 8)
    return np.concatenate([cond, targets], 1), truths


def saved(kind, tmp_path):
    cfg = TrainConfig(stage=2, iterations=2, batch_size=2, offset_max=4, checkpoint_every=0)
    t = Trainer(build_model(kind, TINY, 0), kind, cfg, prepare_frames(gen_sbm(4, 12, H=16, W=16), 8))
    t.run()
    return t.save(tmp_path / f"{kind}.zip")


def test_random_estimator(windows):
    X, y = windows
    est = RandomKeyframes(n_keyframes=2, horizon=T, conditioning=C, random_state=1)
    with pytest.raises(NotFittedError):
        est.predict(X)
    pred = est.fit(X).predict(X)
    assert pred == clone(est).fit(X).predict(X)
    assert all(len(p) == 2 and 1 <= min(p) and max(p) <= T for p in pred)
    assert 0 <= est.score(X, y) <= 1


def test_static_estimator(windows):
    X, y = windows
    est = StaticKeyframes(n_keyframes=2, horizon=T, conditioning=C).fit(X, y)
    assert est.placement_ == ev.static_baseline_fit(y, 2, T)
    assert est.predict(X[:3]) == [est.placement_] * 3
    assert est.get_params()["n_keyframes"] == 2


def test_window_validation(windows):
    X, _ = windows
    with pytest.raises(ValueError, match="C\\+T"):
        check_windows(X[:, 1:], C, T)
    with pytest.raises(ValueError, match="expected windows"):
        check_windows(X[0], C, T)
    bad = X.copy()
    bad[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        check_windows(bad, C, T)
    with pytest.raises(ValueError, match="annotation"):
        StaticKeyframes(n_keyframes=2, horizon=T, conditioning=C).fit(X, [[1]])


def test_model_estimators(windows, tmp_path):
    X, y = windows
    keyin = KeyInKeyframes(saved("keyframer", tmp_path)).fit()
    for mode in ("posterior", "prior"):
        pred = keyin.set_params(mode=mode).predict(X)
        assert len(pred) == len(X) and all(p == sorted(p) and (not p or p[-1] <= T) for p in pred)
    assert 0 <= keyin.score(X, y) <= 1
    surprise = SurpriseKeyframes(saved("dense", tmp_path), n_keyframes=2).fit()
    assert all(len(p) == 2 for p in surprise.predict(X))
    with pytest.raises(ValueError, match="mode"):
        KeyInKeyframes(keyin.checkpoint, mode="bogus").fit()
    with pytest.raises(ValueError, match="8x8"):
        keyin.predict(np.zeros((1, C + T, 16, 16, 1)))
