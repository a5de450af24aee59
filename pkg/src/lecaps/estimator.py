"""scikit-learn estimator wrapper around the capsule classifiers.

``CapsuleNetClassifier`` follows the standard fit/predict contract: flat
2-D inputs are reshaped to images via ``image_shape`` (or inferred as
square grayscale), labels may be arbitrary values and are mapped through
``classes_``. Probabilities are capsule lengths normalized to sum to one,
a calibration-free heuristic that still ranks classes correctly.
"""

from __future__ import annotations

from contextlib import nullcontext

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .models import ModelConfig, build_model
from .data import DatasetSplit
from .routing import capsule_lengths
from .tensor import Tensor, clear_tape, no_grad
from .trainer import TrainConfig, iterate_batches, single_thread, train

__all__ = ["CapsuleNetClassifier"]


class CapsuleNetClassifier(BaseEstimator, ClassifierMixin):
    """Capsule network classifier with the scikit-learn estimator API.

    Parameters mirror the model and training configs; see ``ModelConfig``
    and ``TrainConfig`` for semantics. ``image_shape`` is (channels,
    height, width) for flat inputs; 4-D inputs carry their own shape.
    """

    def __init__(
        self,
        variant: str = "lecaps",
        image_shape: tuple[int, int, int] | None = None,
        decoder: str | None = None,
        routing_iters: int = 3,
        dropout_rate: float = 0.0,
        width: float = 1.0,
        epochs: int = 3,
        batch_size: int = 128,
        lr: float = 0.001,
        gamma: float = 0.96,
        hard_training: bool = False,
        seed: int = 0,
        deterministic: bool = False,
        validation_fraction: float = 0.1,
    ):
        self.variant = variant
        self.image_shape = image_shape
        self.decoder = decoder
        self.routing_iters = routing_iters
        self.dropout_rate = dropout_rate
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.gamma = gamma
        self.hard_training = hard_training
        self.seed = seed
        self.deterministic = deterministic
        self.validation_fraction = validation_fraction

    # ------------------------------------------------------------------
    # input handling

    def _resolve_shape(self, n_features: int) -> tuple[int, int, int]:
        if self.image_shape is not None:
            c, h, w = self.image_shape
            if c * h * w != n_features:
                raise ValueError(f"image_shape {self.image_shape} does not match {n_features} features")
            if h != w:
                raise ValueError(f"only square images are supported, got {h}x{w}")
            return c, h, w
        side = int(round(np.sqrt(n_features)))
        if side * side != n_features:
            raise ValueError(
                f"cannot infer a square image from {n_features} features; pass image_shape=(c, h, w)"
            )
        return 1, side, side

    def _as_images(self, X: np.ndarray) -> np.ndarray:
        if X.ndim == 4:
            if X.shape[2] != X.shape[3]:
                raise ValueError(f"only square images are supported, got {X.shape}")
            return X.astype(np.float32, copy=False)
        c, h, w = self._resolve_shape(X.shape[1])
        return X.reshape(X.shape[0], c, h, w).astype(np.float32, copy=False)

    def _validate(self, X, y=None, fitting: bool = False):
        if fitting:
            if np.asarray(X).ndim == 4:
                X = np.asarray(X, dtype=np.float64)
                y = np.asarray(y)
                if y.ndim != 1 or y.shape[0] != X.shape[0]:
                    raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
            else:
                X, y = check_X_y(X, y, dtype=np.float64)
            return X, y
        arr = np.asarray(X)
        if arr.ndim == 4:
            return np.asarray(X, dtype=np.float64)
        return check_array(X, dtype=np.float64)

    # ------------------------------------------------------------------
    # estimator API

    def fit(self, X, y) -> "CapsuleNetClassifier":
        X, y = self._validate(X, y, fitting=True)
        images = self._as_images(np.asarray(X))
        self.classes_, y_indices = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit a classifier")
        self.n_features_in_ = int(np.prod(images.shape[1:]))

        c, h = images.shape[1], images.shape[2]
        config = ModelConfig(
            variant=self.variant,
            image_size=h,
            in_channels=c,
            n_classes=len(self.classes_),
            routing_iters=self.routing_iters,
            decoder=self.decoder if self.decoder is not None else ("fc" if self.variant == "baseline" else "deconv"),
            dropout_rate=self.dropout_rate,
            width=self.width,
        )
        train_config = TrainConfig(
            lr=self.lr,
            gamma=self.gamma,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            hard_training=self.hard_training,
            deterministic=self.deterministic,
        )
        rng = np.random.default_rng(self.seed)
        n = images.shape[0]
        n_val = max(1, int(round(n * self.validation_fraction))) if n > 1 else 0
        order = rng.permutation(n)
        val_idx, fit_idx = order[:n_val], order[n_val:]
        if fit_idx.size == 0:
            fit_idx = order
        labels = y_indices.astype(np.int64)
        train_split = DatasetSplit(images[fit_idx], labels[fit_idx], "fit")
        val_split = DatasetSplit(images[val_idx], labels[val_idx], "val") if n_val else train_split

        self.model_ = build_model(config, rng)
        guard = single_thread() if self.deterministic else nullcontext()
        with guard:
            self.history_, _, _ = train(self.model_, train_split, val_split, train_config, rng=rng)
        return self

    def _lengths(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._validate(X)
        images = self._as_images(np.asarray(X))
        expected = (self.model_.config.in_channels, self.model_.config.image_size, self.model_.config.image_size)
        if images.shape[1:] != expected:
            raise ValueError(f"input images {images.shape[1:]} do not match the fitted geometry {expected}")
        out = []
        with no_grad():
            for idx in iterate_batches(images.shape[0], self.batch_size):
                caps = self.model_.forward(Tensor(images[idx]), training=False)
                out.append(capsule_lengths(caps).data.copy())
        clear_tape()
        return np.concatenate(out, axis=0)

    def decision_function(self, X) -> np.ndarray:
        """Raw capsule lengths, [n, n_classes]."""
        return self._lengths(X)

    def predict_proba(self, X) -> np.ndarray:
        lengths = self._lengths(X)
        totals = lengths.sum(axis=1, keepdims=True)
        totals[totals == 0.0] = 1.0
        return lengths / totals

    def predict(self, X) -> np.ndarray:
        lengths = self._lengths(X)
        return self.classes_[np.argmax(lengths, axis=1)]
