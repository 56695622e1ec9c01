"""scikit-learn compatible wrappers around the network and the data pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import datapipe
from .datapipe import Dataset
from .model import BiResNet, BiResNetConfig
from .nncore import rng_for
from .trainer import TrainConfig, evaluate, predict_proba, train
from .validation import check_positive, check_signals, check_signals_labels


class BiResNetClassifier(ClassifierMixin, BaseEstimator):
    """Bi-ResNet classifier on ``[N, C, T]`` waveform stacks.

    Labels may be arbitrary; they are encoded to ``0..K-1`` in sorted order.
    When no ``validation_data`` is passed to :meth:`fit`, a stratified
    ``validation_fraction`` of the training data is held out for the LR
    plateau monitor.
    """

    def __init__(self, stages=(32, 64, 128, 256), blocks_per_stage=2, kernel_sizes=(3, 5, 7, 9),
                 intralink_n=1, intralink_position="post_add", block_type="st", activation="intralink",
                 epochs=100, batch_size=64, lr=0.01, plateau_factor=0.5, plateau_patience=10,
                 plateau_epsilon=1e-4, l2_lambda=1e-4, validation_fraction=0.1, random_state=0):
        self.stages = stages
        self.blocks_per_stage = blocks_per_stage
        self.kernel_sizes = kernel_sizes
        self.intralink_n = intralink_n
        self.intralink_position = intralink_position
        self.block_type = block_type
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.plateau_factor = plateau_factor
        self.plateau_patience = plateau_patience
        self.plateau_epsilon = plateau_epsilon
        self.l2_lambda = l2_lambda
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr0=self.lr,
                           plateau_factor=self.plateau_factor, plateau_patience=self.plateau_patience,
                           plateau_epsilon=self.plateau_epsilon, l2_lambda=self.l2_lambda,
                           seed=self.random_state, intralink_n=self.intralink_n)

    def _model_config(self, n_channels: int, n_classes: int) -> BiResNetConfig:
        return BiResNetConfig(input_channels=n_channels, stages=tuple(self.stages),
                              blocks_per_stage=self.blocks_per_stage, kernel_sizes=tuple(self.kernel_sizes),
                              intralink_n=self.intralink_n, intralink_position=self.intralink_position,
                              block_type=self.block_type, activation=self.activation, num_classes=n_classes)

    def _holdout(self, y):
        g = rng_for(self.random_state, "estimator/holdout")
        val = []
        for cls in np.unique(y):
            idx = g.permutation(np.flatnonzero(y == cls))
            val.extend(idx[:max(1, int(round(self.validation_fraction * len(idx))))])
        mask = np.zeros(len(y), dtype=bool)
        mask[val] = True
        return ~mask, mask

    def fit(self, X, y, validation_data=None):
        X, y = check_signals_labels(X, y)
        check_positive("validation_fraction", self.validation_fraction, allow_zero=True)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if validation_data is not None:
            Xv, yv = check_signals_labels(*validation_data, n_channels=X.shape[1])
            yv_enc = np.searchsorted(self.classes_, yv)
            if np.any(self.classes_[np.minimum(yv_enc, len(self.classes_) - 1)] != yv):
                raise ValueError("validation labels contain classes not seen in training")
            tr, va = (X, y_enc), (Xv, yv_enc)
        elif self.validation_fraction > 0:
            keep, hold = self._holdout(y_enc)
            tr, va = (X[keep], y_enc[keep]), (X[hold], y_enc[hold])
        else:
            tr = va = (X, y_enc)
        cfg = self._train_config()
        self.n_features_in_ = X.shape[1]
        self.model_ = BiResNet(self._model_config(X.shape[1], len(self.classes_)), seed=self.random_state,
                               dtype=np.float32)
        train_ds = Dataset(tr[0], tr[1], np.full(len(tr[1]), np.inf))
        val_ds = Dataset(va[0], va[1], np.full(len(va[1]), np.inf))
        _, self.history_ = train(self.model_, train_ds, val_ds, cfg)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_signals(X, self.n_features_in_)
        return predict_proba(self.model_, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def confusion(self, X, y):
        """Accuracy and confusion matrix in encoded label order."""
        check_is_fitted(self, "model_")
        X, y = check_signals_labels(X, y, self.n_features_in_)
        return evaluate(self.model_, Dataset(X, np.searchsorted(self.classes_, y), np.full(len(y), np.inf)))


class Downsampler(TransformerMixin, BaseEstimator):
    """Keep every ``factor``-th sample of ``[N, C, T]`` stacks."""

    def __init__(self, factor=1):
        self.factor = factor

    def fit(self, X, y=None):
        datapipe._check_factor(self.factor)
        self.n_features_in_ = check_signals(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return np.ascontiguousarray(check_signals(X, self.n_features_in_)[:, :, ::self.factor])


class NoiseInjector(TransformerMixin, BaseEstimator):
    """Add white noise at a per-channel SNR; ``snr_db=None`` passes data through."""

    def __init__(self, snr_db=None, random_state=0):
        self.snr_db = snr_db
        self.random_state = random_state

    def fit(self, X, y=None):
        self.n_features_in_ = check_signals(X).shape[1]
        return self

    def transform(self, X, seeds=None):
        check_is_fitted(self, "n_features_in_")
        X = check_signals(X, self.n_features_in_)
        if self.snr_db is None:
            return X
        seeds = np.arange(len(X)) if seeds is None else np.asarray(seeds)
        ds = datapipe.add_noise(Dataset(X, np.zeros(len(X)), np.zeros(len(X)), seeds=seeds),
                                self.snr_db, self.random_state)
        return ds.X


class ChannelStandardizer(TransformerMixin, BaseEstimator):
    """Per-channel z-score with statistics taken over records and time."""

    def fit(self, X, y=None):
        X = check_signals(X)
        self.n_features_in_ = X.shape[1]
        stats = datapipe.compute_stats(X)
        self.mean_, self.std_ = stats.mean, stats.std
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_signals(X, self.n_features_in_)
        return datapipe.normalize(X, datapipe.ChannelStats(self.mean_, self.std_))

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_signals(X, self.n_features_in_)
        return X * np.maximum(self.std_, 1e-8)[None, :, None] + self.mean_[None, :, None]
