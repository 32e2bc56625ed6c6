"""scikit-learn style wrapper around the training loop."""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .config import RunConfig
from .training import predict, train


def split_modalities(X, n_channels_1: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Accept ``(X1, X2)`` or a channel-stacked ``(N, m, m, n1 + n2)`` array."""
    if isinstance(X, (tuple, list)) and len(X) == 2:
        X1 = check_array(X[0], allow_nd=True, ensure_min_features=1, dtype=np.float64)
        X2 = check_array(X[1], allow_nd=True, ensure_min_features=1, dtype=np.float64)
    else:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 4:
            raise ValueError(f"expected (N, m, m, channels) patches, got shape {X.shape}")
        if n_channels_1 is None or not 0 < n_channels_1 < X.shape[-1]:
            raise ValueError("n_channels_1 must split the stacked channel axis into two non-empty parts")
        X1, X2 = X[..., :n_channels_1], X[..., n_channels_1:]
    if X1.ndim != 4 or X2.ndim != 4:
        raise ValueError("each modality must be (N, m, m, channels)")
    if X1.shape[:3] != X2.shape[:3]:
        raise ValueError(f"modalities disagree on patch layout: {X1.shape} vs {X2.shape}")
    if X1.shape[1] != X1.shape[2]:
        raise ValueError("patches must be square")
    return X1, X2


class MSCDGClassifier(ClassifierMixin, BaseEstimator):
    """Patch classifier trained with adversarial augmentation and prototype heads.

    ``X`` is either a pair ``(X1, X2)`` of NHWC patch stacks or one stacked
    array whose first ``n_channels_1`` channels belong to the first modality.
    Values are expected in ``[0, 1]``. ``transform`` returns the concatenated
    per-branch cross-domain embeddings.
    """

    def __init__(self, n_channels_1=None, epochs=30, batch_size=64, t_pre=2, t_adv=10,
                 lr_model=1e-3, lr_adv=5e-6, weight_decay=1e-4, alpha1=0.01, alpha2=0.1,
                 gamma_plus=2.0, gamma_minus=4.0, d_spa=32, d_cha=3, d_c=64, d_i=64, heads=2,
                 adv_layers=5, adv_width=32, use_kmm=True, use_adv=True, use_consist=True,
                 random_state=0):
        self.n_channels_1 = n_channels_1
        self.epochs = epochs
        self.batch_size = batch_size
        self.t_pre = t_pre
        self.t_adv = t_adv
        self.lr_model = lr_model
        self.lr_adv = lr_adv
        self.weight_decay = weight_decay
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.gamma_plus = gamma_plus
        self.gamma_minus = gamma_minus
        self.d_spa = d_spa
        self.d_cha = d_cha
        self.d_c = d_c
        self.d_i = d_i
        self.heads = heads
        self.adv_layers = adv_layers
        self.adv_width = adv_width
        self.use_kmm = use_kmm
        self.use_adv = use_adv
        self.use_consist = use_consist
        self.random_state = random_state

    def _config(self, patch: int) -> RunConfig:
        params = self.get_params()
        params.pop("n_channels_1")
        seed = params.pop("random_state")
        if not isinstance(seed, (int, np.integer)):
            raise ValueError("random_state must be an integer seed")
        return RunConfig(patch=patch, seed=int(seed), **params)

    def fit(self, X, y):
        X1, X2 = split_modalities(X, self.n_channels_1)
        y = column_or_1d(y, warn=True)
        check_classification_targets(y)
        if len(y) != len(X1):
            raise ValueError(f"{len(X1)} patches but {len(y)} labels")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        result = train(X1, X2, codes, self._config(X1.shape[1]), n_classes=len(self.classes_))
        self.model_ = result.model
        self.bank_ = result.bank
        self.adversary_ = result.adversary
        self.history_ = result.history
        self.config_ = result.config
        self.n_channels_ = (X1.shape[-1], X2.shape[-1])
        return self

    def _inputs(self, X):
        check_is_fitted(self, "model_")
        X1, X2 = split_modalities(X, self.n_channels_1)
        if (X1.shape[-1], X2.shape[-1]) != self.n_channels_:
            raise ValueError(f"expected channels {self.n_channels_}, got {(X1.shape[-1], X2.shape[-1])}")
        if X1.shape[1] != self.config_.patch:
            raise ValueError(f"expected {self.config_.patch}x{self.config_.patch} patches")
        return X1, X2

    def _predict(self, X):
        X1, X2 = self._inputs(X)
        return predict(self.model_, self.bank_, X1, X2)

    def predict_proba(self, X) -> np.ndarray:
        return self._predict(X)[1]

    def predict(self, X) -> np.ndarray:
        codes = self._predict(X)[0]
        return self.classes_[codes]

    def transform(self, X) -> np.ndarray:
        return self._predict(X)[2]
