"""scikit-learn style classifier around the distillation-trained bundle."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .distill import TrainConfig, train
from .models import LstmNetConfig, ModelBundle, ResTcnConfig
from .ndiff import softmax_t


def _check_windows(X):
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected windows shaped [n_samples, window_len, n_channels], got {X.shape}")
    return X


class FusionDistillClassifier(ClassifierMixin, BaseEstimator):
    """Res-TCN + LSTM classifier trained with fusion knowledge distillation.

    Parameters
    ----------
    mode : {'fused', 'tcn', 'lstm'}
        ``fused`` trains both sub-networks and the fusion head with the
        distillation objective; the other two train a single sub-network on
        cross-entropy alone.
    temperature : float
        Softmax temperature of the distillation terms.
    classes : sequence, optional
        Full label set. Defaults to the labels seen in ``fit``.
    """

    def __init__(self, mode="fused", temperature=4.0, learning_rate=1e-3, batch_size=64,
                 epochs=20, random_state=0, fusion_input="features", soft_ce=False,
                 fkd_t2_scaling=False, tcn_filters=(8, 16, 32, 64), tcn_strides=(1, 2, 2, 2),
                 kernel_size=6, lstm_hidden=64, dense_hidden=32, classes=None, task=None):
        self.mode = mode
        self.temperature = temperature
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state
        self.fusion_input = fusion_input
        self.soft_ce = soft_ce
        self.fkd_t2_scaling = fkd_t2_scaling
        self.tcn_filters = tcn_filters
        self.tcn_strides = tcn_strides
        self.kernel_size = kernel_size
        self.lstm_hidden = lstm_hidden
        self.dense_hidden = dense_hidden
        self.classes = classes
        self.task = task

    def _train_config(self) -> TrainConfig:
        return TrainConfig(temperature=self.temperature, learning_rate=self.learning_rate,
                           batch_size=self.batch_size, epochs=self.epochs,
                           seed=self.random_state, soft_ce=self.soft_ce,
                           fkd_t2_scaling=self.fkd_t2_scaling)

    def _encode(self, y):
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError("labels not in classes_")
        return idx

    def fit(self, X, y, X_val=None, y_val=None):
        X = _check_windows(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        self.classes_ = np.unique(y) if self.classes is None else np.asarray(sorted(self.classes))
        bundle = ModelBundle(
            n_features=X.shape[2], n_classes=len(self.classes_), window_len=X.shape[1],
            task=self.task, mode=self.mode, fusion_input=self.fusion_input,
            tcn_config=ResTcnConfig(filters=tuple(self.tcn_filters), strides=tuple(self.tcn_strides),
                                    kernel=self.kernel_size),
            lstm_config=LstmNetConfig(hidden=self.lstm_hidden, dense_hidden=self.dense_hidden),
            class_names=tuple(str(c) for c in self.classes_), seed=self.random_state)
        if X_val is not None:
            X_val, y_val = _check_windows(X_val), self._encode(y_val)
        self.bundle_, self.history_ = train(bundle, X, self._encode(y), X_val, y_val,
                                            self._train_config(), use_fkd=True)
        self.n_features_in_ = X.shape[2]
        return self

    @classmethod
    def from_bundle(cls, bundle: ModelBundle, classes=None):
        """Wrap an already trained bundle (e.g. loaded from a checkpoint)."""
        est = cls(mode=bundle.mode, fusion_input=bundle.fusion_input, task=bundle.task)
        names = classes if classes is not None else (bundle.class_names or range(bundle.n_classes))
        est.classes_ = np.asarray(list(names))
        est.bundle_ = bundle
        est.history_ = []
        est.n_features_in_ = bundle.n_features
        return est

    def decision_function(self, X):
        check_is_fitted(self, "bundle_")
        return self.bundle_.predict_logits(_check_windows(X))

    def predict_proba(self, X):
        return softmax_t(self.decision_function(X), 1.0)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
