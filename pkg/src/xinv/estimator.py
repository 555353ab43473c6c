"""Scikit-learn style estimator wrapping the adversarial training loop, so the
algorithm composes with pipelines, cloning, and grid search."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import evaluation, training
from .training import TrainConfig


def _as_image_array(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None, :, :]
    if X.ndim != 4:
        raise ValueError(f"X must be (n, H, W) or (n, 1, H, W), got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    return X


class SourceInvariantClassifier(BaseEstimator, ClassifierMixin):
    """Binary image classifier trained to ignore which source an image came
    from.

    fit takes the usual (X, y) plus a `sources` array of integer source ids;
    in adversarial modes a discriminator is trained to recover the source from
    the latent features while the feature extractor is penalized for letting
    it succeed.
    """

    def __init__(self, mode="grad_reversal", lam=0.3, epochs=20, batch_size=64,
                 lr=0.003, momentum=0.9, d_steps=1, seed=0):
        self.mode = mode
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.d_steps = d_steps
        self.seed = seed

    def _config(self):
        return TrainConfig(
            lam=self.lam,
            mode=self.mode,
            d_steps=self.d_steps,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            seed=self.seed,
        )

    def fit(self, X, y, sources=None):
        X = _as_image_array(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"{X.shape[0]} images but {y.shape[0]} labels")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("y must be binary {0, 1}")
        if sources is None:
            if self.mode != "baseline":
                raise ValueError(f"mode {self.mode!r} requires a `sources` array")
            sources = np.zeros(X.shape[0], dtype=np.intp)
        sources = np.asarray(sources, dtype=np.intp).ravel()
        if sources.shape[0] != X.shape[0]:
            raise ValueError(f"{X.shape[0]} images but {sources.shape[0]} source ids")
        self.params_, self.history_ = training.fit_arrays(self._config(), X, y, sources)
        self.classes_ = np.array([0, 1])
        self.n_sources_ = int(sources.max()) + 1
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this SourceInvariantClassifier instance is not fitted yet")

    def predict_proba(self, X):
        self._check_fitted()
        p = evaluation.score_batches(self.params_, _as_image_array(X))
        return np.column_stack([1.0 - p, p])

    def decision_function(self, X):
        return self.predict_proba(X)[:, 1]

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)

    def transform(self, X):
        """Latent feature matrix (n, feature_dim) from the fitted extractor."""
        self._check_fitted()
        from . import model
        from .autodiff import Tensor

        X = _as_image_array(X)
        out = []
        for start in range(0, X.shape[0], 256):
            out.append(model.extract(self.params_, Tensor(X[start : start + 256])).data)
        return np.concatenate(out)
