"""scikit-learn style wrappers around the keyframe detectors.

``X`` is an array of windows ``[n, C + T, H, W, channels]``: the first ``C``
frames condition the prediction and the remaining ``T`` are the sequence
to analyse.  ``y`` is a list of annotated keyframe times per window, in
``1..T`` after the last conditioning frame.  ``predict`` returns a list of
sorted time lists.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import eval as metrics


def check_windows(X, C: int, T: int, image_size: int | None = None, channels: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5:
        raise ValueError(f"expected windows [n, C+T, H, W, channels], got shape {X.shape}")
    if X.shape[1] != C + T:
        raise ValueError(f"windows hold {X.shape[1]} frames, expected C+T = {C + T}")
    if image_size is not None and X.shape[2:4] != (image_size, image_size):
        raise ValueError(f"frames are {X.shape[2:4]}, expected {image_size}x{image_size}")
    if channels is not None and X.shape[4] != channels:
        raise ValueError(f"frames have {X.shape[4]} channels, expected {channels}")
    if not np.isfinite(X).all():
        raise ValueError("windows contain non-finite values")
    return X


def check_keyframes(y, n: int | None = None, T: int | None = None) -> list[list[int]]:
    out = [metrics.check_times(sorted(t), T) for t in y]
    if n is not None and len(out) != n:
        raise ValueError(f"got {len(out)} annotation lists for {n} windows")
    return out


class _KeyframeScorer:
    tol = 1

    def score(self, X, y) -> float:
        """Mean F1 between predicted and annotated keyframe times."""
        pred = self.predict(X)
        y = check_keyframes(y, len(pred))
        return float(np.mean([metrics.f1(p, t, self.tol).f1 for p, t in zip(pred, y)]))


class RandomKeyframes(_KeyframeScorer, BaseEstimator):
    def __init__(self, n_keyframes=4, horizon=20, conditioning=5, random_state=0):
        self.n_keyframes = n_keyframes
        self.horizon = horizon
        self.conditioning = conditioning
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict(self, X):
        check_is_fitted(self)
        n = len(check_windows(X, self.conditioning, self.horizon))
        return [metrics.random_baseline(self.n_keyframes, self.horizon, self.random_state * 1_000_003 + i)
                for i in range(n)]


class StaticKeyframes(_KeyframeScorer, BaseEstimator):
    """One placement shared by every sequence, chosen to maximize mean training F1."""

    def __init__(self, n_keyframes=4, horizon=20, conditioning=5, tol=1, restarts=5, random_state=0):
        self.n_keyframes = n_keyframes
        self.horizon = horizon
        self.conditioning = conditioning
        self.tol = tol
        self.restarts = restarts
        self.random_state = random_state

    def fit(self, X, y):
        y = check_keyframes(y, None if X is None else len(X), self.horizon)
        self.placement_ = metrics.static_baseline_fit(y, self.n_keyframes, self.horizon, self.tol, self.restarts,
                                                      self.random_state)
        return self

    def predict(self, X):
        check_is_fitted(self, "placement_")
        n = len(check_windows(X, self.conditioning, self.horizon))
        return [list(self.placement_) for _ in range(n)]


class SurpriseKeyframes(_KeyframeScorer, BaseEstimator):
    """Peaks of the per-step KL of a trained dense predictor (given as a checkpoint path)."""

    def __init__(self, checkpoint=None, n_keyframes=4, batch_size=100):
        self.checkpoint = checkpoint
        self.n_keyframes = n_keyframes
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        from .training import load_model

        self.model_, _ = load_model(self.checkpoint)
        return self

    def predict(self, X):
        import torch

        check_is_fitted(self, "model_")
        cfg = self.model_.cfg
        X = check_windows(X, cfg.C, cfg.T, cfg.image_size, cfg.channels)
        out = []
        for i in range(0, len(X), self.batch_size):
            x = torch.from_numpy(X[i : i + self.batch_size])
            times, _ = metrics.surprise_times(self.model_, x[:, : cfg.C], x[:, cfg.C :], self.n_keyframes)
            out += times
        return out


class KeyInKeyframes(_KeyframeScorer, BaseEstimator):
    """Keyframe times of a trained keyframe model (given as a checkpoint path).

    ``mode="posterior"`` infers latents from the observed sequence;
    ``mode="prior"`` samples them, so the prediction ignores the targets.
    """

    def __init__(self, checkpoint=None, mode="posterior", random_state=0):
        self.checkpoint = checkpoint
        self.mode = mode
        self.random_state = random_state

    def fit(self, X=None, y=None):
        from .training import load_model

        if self.mode not in ("posterior", "prior"):
            raise ValueError("mode must be 'posterior' or 'prior'")
        self.model_, _ = load_model(self.checkpoint)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        cfg = self.model_.cfg
        X = check_windows(X, cfg.C, cfg.T, cfg.image_size, cfg.channels)
        return metrics.keyin_times(self.model_, X[:, : cfg.C], X[:, cfg.C :], self.mode, self.random_state)
