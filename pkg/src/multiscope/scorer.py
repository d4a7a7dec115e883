"""Logistic detection-to-prefix match scorer trained by full-batch gradient descent."""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .geometry import Detection
from .tracker import (FEATURE_NAMES, N_FEATURES, TrackPrefix, TrainingExample, example_features,
                      pair_features)

SCORER_FORMAT = "multiscope.scorer"
SCORER_VERSION = 1


def loss_and_grad(params: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (+ L2 on weights, not the bias) and its gradient.

    ``params`` is ``[w_1..w_d, b]``.
    """
    w, b = params[:-1], params[-1]
    z = X @ w + b
    # log(1 + e^z) - y z, computed stably
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * w @ w
    r = (expit(z) - y) / len(y)
    grad = np.concatenate([X.T @ r + l2 * w, [r.sum()]])
    return float(loss), grad


class LogisticMatchScorer(ClassifierMixin, BaseEstimator):
    """Scores how likely a detection continues a track prefix.

    Features are standardised with the training mean and spread, then fit by
    full-batch gradient descent with step ``1/L``, where ``L`` bounds the
    curvature of the loss; that step size makes the training loss non-increasing.

    Parameters
    ----------
    frame_size : tuple of int
        Native frame ``(w, h)`` used to normalise features.
    l2 : float, default=1e-4
    max_iter : int, default=10000
    tol : float, default=1e-9
        Stop once an epoch improves the loss by less than this.
    floor : float, default=0.15
        Minimum score for a match during tracking. Training is class-balanced,
        while at tracking time a prefix has one true continuation among many
        candidates and the assignment already resolves competition, so the
        floor sits well below 0.5.
    """

    matcher = "hungarian"

    def __init__(self, frame_size=(640, 352), l2=1e-4, max_iter=10000, tol=1e-9, floor=0.15):
        self.frame_size = frame_size
        self.l2 = l2
        self.max_iter = max_iter
        self.tol = tol
        self.floor = floor

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        if X.shape[1] != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} features, got {X.shape[1]}")
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2 or set(self.classes_) != {0, 1}:
            raise ValueError("training needs both match (1) and non-match (0) labels")
        self.mean_ = X.mean(axis=0)
        scale = X.std(axis=0)
        self.scale_ = np.where(scale > 1e-12, scale, 1.0)
        Z = (X - self.mean_) / self.scale_
        # curvature of the mean logistic loss is at most lambda_max(Z'Z/n)/4 (bias column included)
        A = np.column_stack([Z, np.ones(len(Z))])
        lipschitz = 0.25 * np.linalg.eigvalsh(A.T @ A / len(A))[-1] + self.l2
        step = 1.0 / lipschitz
        params = np.zeros(Z.shape[1] + 1)
        loss, grad = loss_and_grad(params, Z, y, self.l2)
        self.loss_curve_ = [loss]
        for _ in range(self.max_iter):
            params = params - step * grad
            new_loss, grad = loss_and_grad(params, Z, y, self.l2)
            self.loss_curve_.append(new_loss)
            if loss - new_loss < self.tol:
                break
            loss = new_loss
        self.n_iter_ = len(self.loss_curve_) - 1
        self.coef_ = params[:-1] / self.scale_
        self.intercept_ = float(params[-1] - self.coef_ @ self.mean_)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def score_pairs(self, prefixes: Sequence[TrackPrefix], detections: Sequence[Detection], frame: int) -> np.ndarray:
        check_is_fitted(self, "coef_")
        if not prefixes or not detections:
            return np.zeros((len(prefixes), len(detections)))
        F = pair_features(prefixes, detections, frame, tuple(self.frame_size))
        return expit(F @ self.coef_ + self.intercept_)

    def to_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "format": SCORER_FORMAT,
            "version": SCORER_VERSION,
            "features": list(FEATURE_NAMES),
            "params": {"frame_size": list(self.frame_size), "l2": self.l2, "max_iter": self.max_iter,
                       "tol": self.tol, "floor": self.floor},
            "coef": self.coef_.tolist(),
            "intercept": self.intercept_,
            "mean": self.mean_.tolist(),
            "scale": self.scale_.tolist(),
            "holdout_accuracy": getattr(self, "holdout_accuracy_", None),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticMatchScorer":
        if d.get("format") != SCORER_FORMAT or d.get("version") != SCORER_VERSION:
            raise ValueError("unsupported scorer file")
        if list(d["features"]) != list(FEATURE_NAMES):
            raise ValueError("scorer was trained on a different feature set")
        p = dict(d["params"])
        p["frame_size"] = tuple(p["frame_size"])
        est = cls(**p)
        est.coef_ = np.array(d["coef"])
        est.intercept_ = float(d["intercept"])
        est.mean_ = np.array(d["mean"])
        est.scale_ = np.array(d["scale"])
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = N_FEATURES
        if d.get("holdout_accuracy") is not None:
            est.holdout_accuracy_ = d["holdout_accuracy"]
        return est

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path) -> "LogisticMatchScorer":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def train_scorer(examples: Sequence[TrainingExample], frame_size: tuple[int, int], seed: int = 0,
                 holdout: float = 0.2, **params) -> LogisticMatchScorer:
    """Fit on a shuffled split of ``examples``; held-out accuracy lands in ``holdout_accuracy_``."""
    X, y = example_features(examples, frame_size)
    if len(set(y.tolist())) < 2:
        raise ValueError("examples contain a single label")
    order = np.random.default_rng(seed).permutation(len(y))
    n_test = int(round(holdout * len(y)))
    test, train = order[:n_test], order[n_test:]
    scorer = LogisticMatchScorer(frame_size=tuple(frame_size), **params).fit(X[train], y[train])
    scorer.holdout_accuracy_ = float(scorer.score(X[test], y[test])) if n_test else None
    return scorer
