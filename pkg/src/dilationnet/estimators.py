"""Scikit-learn style facade over the training pipeline.

Both estimators take image batches as (n, r, r, 3) float arrays in [0, 1]
plus binary labels, so they compose with sklearn model selection and
pipelines. The heavy lifting stays in the library modules; this layer only
validates, loops, and adapts.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .checkpoint import checkpoint_from_net
from .data import Batch, epoch_order, resample
from .fusion import (
    FrozenBackbone,
    FusionSpec,
    build_fusion_head,
    extract_backbone,
    fused_features,
    fused_width,
    fusion_forward,
)
from .networks import RESOLUTION_BY_VARIANT, build_for_variant
from .tensor import ComputationRecord, Tensor, backward
from .training import OptimizerState, TrainConfig, adam_step, bce_l2_loss
from .validation import check_binary_labels, check_image_batch

FloatArray = np.ndarray


def _fit_config(est) -> TrainConfig:
    return TrainConfig(learning_rate=est.learning_rate, l2=est.l2,
                       batch_size=est.batch_size, epochs=est.epochs,
                       seed=est.seed)


def _fit_loop(forward_scores, params: dict[str, Tensor], labels: FloatArray,
              cfg: TrainConfig) -> None:
    """Minibatch Adam over an in-memory array, shuffled per epoch."""
    weights = [t for name, t in params.items() if name.endswith(".weight")]
    state = OptimizerState(params)
    n = labels.size
    for epoch in range(cfg.epochs):
        order = epoch_order(n, cfg.seed, epoch)
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            with ComputationRecord() as rec:
                scores = forward_scores(rows)
                loss = bce_l2_loss(scores, labels[rows], weights, cfg.l2)
            grads = backward(loss, rec, targets=list(params.values()))
            adam_step(params,
                      {name: grads[t] for name, t in params.items()},
                      state, cfg)


class DilationNetClassifier(ClassifierMixin, BaseEstimator):
    """Single-resolution convolutional classifier.

    Trains one network variant from scratch on the images handed to fit;
    no internal holdout, no early stopping. For the staged pipeline with
    validation-based model selection use the training module directly.
    """

    def __init__(self, variant: str = "A", epochs: int = 10,
                 learning_rate: float = 1e-3, l2: float = 1e-4,
                 batch_size: int = 32, seed: int = 0):
        self.variant = variant
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.l2 = l2
        self.batch_size = batch_size
        self.seed = seed

    def _resolution(self) -> int:
        if self.variant not in RESOLUTION_BY_VARIANT:
            raise ValueError(f"variant must be one of "
                             f"{sorted(RESOLUTION_BY_VARIANT)}, "
                             f"got {self.variant!r}")
        return RESOLUTION_BY_VARIANT[self.variant]

    def fit(self, X, y) -> "DilationNetClassifier":
        images = check_image_batch(X, self._resolution())
        labels = check_binary_labels(y, images.shape[0])
        net = build_for_variant(self.variant, seed=self.seed)
        _fit_loop(lambda rows: net.forward(images[rows], training=True),
                  net.params, labels, _fit_config(self))
        self.net_ = net
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = images[0].size
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("this classifier has not been fitted yet")

    def predict_proba(self, X) -> FloatArray:
        self._check_fitted()
        images = check_image_batch(X, self._resolution())
        scores = self.net_.forward(images, training=False).data.reshape(-1)
        return np.column_stack([1.0 - scores, scores])

    def predict(self, X) -> FloatArray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def transform(self, X) -> FloatArray:
        """Pooled backbone feature vectors, (n, feature_width)."""
        self._check_fitted()
        images = check_image_batch(X, self._resolution())
        bb = extract_backbone(checkpoint_from_net(self.net_))
        return bb.features(images).data


class FusionClassifier(ClassifierMixin, BaseEstimator):
    """Multi-resolution head over frozen single-resolution backbones.

    ``backbones`` maps variant name to a trained FrozenBackbone (see
    fusion.extract_backbone). fit only trains the dense head; backbone
    parameters are never touched. Images are accepted at any square size
    and resampled internally to each member's resolution.
    """

    def __init__(self, backbones: dict[str, FrozenBackbone] | None = None,
                 epochs: int = 10, learning_rate: float = 1e-3,
                 l2: float = 1e-4, batch_size: int = 32, seed: int = 0):
        self.backbones = backbones
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.l2 = l2
        self.batch_size = batch_size
        self.seed = seed

    def _members(self) -> tuple[FusionSpec, list[FrozenBackbone]]:
        if not self.backbones:
            raise ValueError("backbones must map at least two variant names "
                             "to FrozenBackbone instances")
        spec = FusionSpec(members=tuple(self.backbones))
        ordered = [self.backbones[m] for m in spec.members]
        for name, bb in zip(spec.members, ordered):
            if bb.variant != name:
                raise ValueError(f"backbone registered under {name!r} "
                                 f"is a variant-{bb.variant} network")
        return spec, ordered

    def _feature_matrix(self, images: FloatArray,
                        backbones: list[FrozenBackbone]) -> FloatArray:
        ids = tuple(str(i) for i in range(images.shape[0]))
        labels = np.zeros(images.shape[0], dtype=np.float32)
        group = {
            bb.resolution: Batch(ids, np.stack([
                resample(img, bb.resolution) for img in images]), labels)
            for bb in backbones
        }
        return fused_features(backbones, group).data

    def fit(self, X, y) -> "FusionClassifier":
        spec, backbones = self._members()
        images = check_image_batch(X)
        labels = check_binary_labels(y, images.shape[0])
        features = self._feature_matrix(images, backbones)
        head = build_fusion_head(spec, fused_width(backbones), seed=self.seed)
        _fit_loop(lambda rows: head.forward(Tensor(features[rows])),
                  head.params, labels, _fit_config(self))
        self.spec_ = spec
        self.backbones_ = backbones
        self.head_ = head
        self.classes_ = np.array([0, 1])
        return self

    def _check_fitted(self):
        if not hasattr(self, "head_"):
            raise NotFittedError("this classifier has not been fitted yet")

    def predict_proba(self, X) -> FloatArray:
        self._check_fitted()
        images = check_image_batch(X)
        features = self._feature_matrix(images, self.backbones_)
        scores = self.head_.forward(Tensor(features)).data.reshape(-1)
        return np.column_stack([1.0 - scores, scores])

    def predict(self, X) -> FloatArray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def transform(self, X) -> FloatArray:
        """Concatenated frozen-backbone features, (n, sum of widths)."""
        self._check_fitted()
        return self._feature_matrix(check_image_batch(X), self.backbones_)
