"""Scikit-learn style facade over the mixture-of-experts classifier.

ImmunityClassifier follows the estimator contract (init args stored
verbatim, state learned in fit carries a trailing underscore), so it plugs
into sklearn tooling: get_params/set_params, clone, pipelines, and scoring.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .attacks import AttackSpec
from .model import RsgMode, build_moe, build_single
from .training import TrainConfig, train_model
from .validation import check_image_batch, check_labels


class ImmunityClassifier(BaseEstimator, ClassifierMixin):
    """Mixture-of-experts image classifier with a random switch gate and
    heatmap regularizers.

    Parameters mirror the training configuration; ``n_experts=1`` trains the
    single-expert baseline (no gate, regularizers inert). Inputs to fit and
    predict are (n_samples, channels, height, width) pixel arrays in [0, 1].
    """

    def __init__(self, n_experts: int = 5, epochs: int = 20, batch_size: int = 32,
                 learning_rate: float = 0.001, weight_decay: float = 5e-4,
                 momentum: float = 0.5, alpha: float = 1.0, beta: float = 1.0,
                 gamma: float = 0.1, mode: str = "standard",
                 inner_attack: AttackSpec | None = None,
                 conv_channels: tuple = (8, 16, 32), augment: bool = False,
                 rsg_train_mode: str = "identity",
                 rsg_eval_mode: str = "fresh_permutation", random_state: int = 0):
        self.n_experts = n_experts
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.mode = mode
        self.inner_attack = inner_attack
        self.conv_channels = conv_channels
        self.augment = augment
        self.rsg_train_mode = rsg_train_mode
        self.rsg_eval_mode = rsg_eval_mode
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate,
                           weight_decay=self.weight_decay, momentum=self.momentum,
                           epochs=self.epochs, batch_size=self.batch_size,
                           alpha=self.alpha, beta=self.beta, gamma=self.gamma,
                           mode=self.mode, inner_attack=self.inner_attack,
                           seed=self.random_state, rsg_train_mode=self.rsg_train_mode,
                           rsg_eval_mode=self.rsg_eval_mode, augment=self.augment)

    def fit(self, X, y):
        from .data import Dataset, DatasetMeta  # local import avoids a cycle at module load

        X = check_image_batch(X)
        y = check_labels(y, len(X))
        config = self._train_config()
        self.classes_ = np.unique(y)
        n_classes = int(self.classes_.max()) + 1
        means = X.mean(axis=(0, 2, 3))
        stds = X.std(axis=(0, 2, 3))
        stds = np.where(stds <= 0, 1.0, stds)
        if self.n_experts == 1:
            self.model_ = build_single(X.shape[1:], n_classes, seed=self.random_state,
                                       channels=tuple(self.conv_channels),
                                       norm_mean=means, norm_std=stds)
        else:
            self.model_ = build_moe(X.shape[1:], n_classes, n_experts=self.n_experts,
                                    seed=self.random_state,
                                    channels=tuple(self.conv_channels),
                                    norm_mean=means, norm_std=stds)
        meta = DatasetMeta(n_classes, means, stds, len(X), "synthetic")
        dataset = Dataset(X, y, meta)
        self.history_ = train_model(self.model_, dataset, config)
        return self

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_image_batch(X)
        rng = np.random.default_rng(self.random_state)
        rec = self.model_.forward(X, rsg=RsgMode.parse(self.rsg_eval_mode), rng=rng)
        return rec.mixture.data

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this ImmunityClassifier instance is not fitted yet; "
                               "call fit first")
