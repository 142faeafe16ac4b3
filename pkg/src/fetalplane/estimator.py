"""scikit-learn compatible wrapper around model building and training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .backbone import load_backbone_config
from .model import ModelConfig, build_model, extract_embedding, predict_proba
from .tensor import default_dtype
from .training import TrainConfig, train_loop


class FetalPlaneClassifier(ClassifierMixin, BaseEstimator):
    """CNN + attention image classifier.

    ``X`` is ``[N, C, H, W]`` or flattened ``[N, C*H*W]`` (reshaped to the
    backbone input geometry).  ``y`` may hold any hashable labels.
    ``transform`` returns penultimate-layer embeddings.
    """

    def __init__(self, backbone="micro", attention="ssa", mha_heads=4, attn_dim=None, mlp_hidden=(256, 128),
                 dropout_p=0.1, epochs=15, batch_size=32, learning_rate=1e-3, augment=True, seed=0,
                 dtype="float32", verbose=False):
        self.backbone = backbone
        self.attention = attention
        self.mha_heads = mha_heads
        self.attn_dim = attn_dim
        self.mlp_hidden = mlp_hidden
        self.dropout_p = dropout_p
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.augment = augment
        self.seed = seed
        self.dtype = dtype
        self.verbose = verbose

    def _images(self, X, reset: bool) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
        if reset:
            cfg = load_backbone_config(self.backbone)
            self.input_shape_ = (cfg.in_channels, cfg.input_resolution, cfg.input_resolution)
        shape = self.input_shape_
        if X.ndim == 2:
            if X.shape[1] != int(np.prod(shape)):
                raise ValueError(f"expected {int(np.prod(shape))} features per row, got {X.shape[1]}")
            X = X.reshape(len(X), *shape)
        elif X.ndim == 3 and shape[0] == 1:
            X = X[:, None]
        if tuple(X.shape[1:]) != tuple(shape):
            raise ValueError(f"expected images shaped {shape}, got {X.shape[1:]}")
        return X

    def fit(self, X, y):
        X = self._images(X, reset=True)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        model_cfg = ModelConfig(backbone=self.backbone, attention=self.attention, mha_heads=self.mha_heads,
                                attn_dim=self.attn_dim, mlp_hidden=tuple(self.mlp_hidden),
                                num_classes=len(self.classes_), dropout_p=self.dropout_p)
        jitter = {} if self.augment else {"rotation": 0.0, "zoom": 0.0, "resize_jitter": 0.0,
                                          "hflip": False, "vflip": False}
        train_cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                                seed=self.seed, **jitter)
        callbacks = [lambda r: print(f"epoch {r['epoch']}: loss {r['loss']:.4f} acc {r['accuracy']:.4f}")] \
            if self.verbose else []
        with default_dtype(self.dtype):
            model = build_model(model_cfg, self.seed)
            self.model_, self.history_ = train_loop(model, X, codes, train_cfg, callbacks)
        self.n_features_in_ = int(np.prod(self.input_shape_))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._images(X, reset=False)
        dtype = self.model_.parameters()[0].dtype
        return predict_proba(self.model_, X.astype(dtype))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._images(X, reset=False)
        return extract_embedding(self.model_, X.astype(self.model_.parameters()[0].dtype))
