"""scikit-learn style wrappers over the training functions.

``JointEmbeddingSSL`` is a transformer (fit on a :class:`TileDataset`,
transform images to frozen-encoder embeddings); ``LinearProbe`` and
``SupervisedClassifier`` are classifiers.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .data import TileDataset, check_images
from .exceptions import ValidationError
from .model import EncoderSpec, ExpanderSpec, param_checksum
from .train import ExperimentConfig, branch_for_view, embed, fit_head, fit_joint, fit_supervised


def _images(X, view: str) -> np.ndarray:
    if isinstance(X, TileDataset):
        return X.view(view)
    return check_images(X)


class JointEmbeddingSSL(TransformerMixin, BaseEstimator):
    """Two-branch self-supervised pretraining (VICReg or NT-Xent).

    Parameters mirror :class:`ExperimentConfig`; defaults are the CPU-sized
    protocol (10 epochs, batch 64).

    Attributes
    ----------
    model_ : JointModel
    metrics_ : MetricsRecord
    config_ : ExperimentConfig
    """

    def __init__(
        self,
        loss: str = "vicreg",
        asymmetric: bool = True,
        shared_weights: bool = False,
        degradation: str = "downsample",
        encoder: str = "desk_cnn_small",
        expander_depth: int = 3,
        expander_width: int = 512,
        epochs: int = 10,
        batch_size: int = 64,
        lr_max: float = 1e-3,
        warmup_fraction: float = 0.1,
        fraction: float = 1.0,
        symmetric_source: str = "sparse",
        augment: bool = True,
        random_state: int = 0,
    ):
        self.loss = loss
        self.asymmetric = asymmetric
        self.shared_weights = shared_weights
        self.degradation = degradation
        self.encoder = encoder
        self.expander_depth = expander_depth
        self.expander_width = expander_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.warmup_fraction = warmup_fraction
        self.fraction = fraction
        self.symmetric_source = symmetric_source
        self.augment = augment
        self.random_state = random_state

    def to_config(self) -> ExperimentConfig:
        return ExperimentConfig(
            loss=self.loss,
            asymmetric=self.asymmetric,
            shared_weights=self.shared_weights,
            degradation=self.degradation,
            encoder=EncoderSpec(name=self.encoder),
            expander=ExpanderSpec(depth=self.expander_depth, width=self.expander_width),
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_max=self.lr_max,
            warmup_fraction=self.warmup_fraction,
            fraction=self.fraction,
            seed=self.random_state,
            symmetric_source=self.symmetric_source,
            augment=self.augment,
        )

    def fit(self, X: TileDataset, y=None):
        if not isinstance(X, TileDataset):
            raise ValidationError("JointEmbeddingSSL.fit expects a TileDataset (paired views)")
        self.config_ = self.to_config()
        self.model_, self.metrics_ = fit_joint(self.config_, X)
        return self

    def encoder_for(self, view: str = "sparse") -> torch.nn.Module:
        check_is_fitted(self, "model_")
        return self.model_.branch(branch_for_view(self.model_, view)).encoder

    def transform(self, X, view: str = "sparse") -> np.ndarray:
        """Encoder embeddings (expander discarded) of ``X`` through the branch that sees ``view``."""
        return embed(self.encoder_for(view), _images(X, view)).numpy()

    def save(self, path) -> Path:
        check_is_fitted(self, "model_")
        meta = {"config_hash": self.config_.config_hash(), "seed": self.random_state, "epoch": self.epochs, "config": self.config_.to_dict()}
        return save_checkpoint(self.model_, path, meta)

    @classmethod
    def load(cls, path) -> "JointEmbeddingSSL":
        model, meta = load_checkpoint(path)
        cfg = ExperimentConfig.from_dict(meta["config"])
        est = cls(
            loss=cfg.loss,
            asymmetric=cfg.asymmetric,
            shared_weights=cfg.shared_weights,
            degradation=cfg.degradation,
            encoder=cfg.encoder.name,
            expander_depth=cfg.expander.depth,
            expander_width=cfg.expander.width,
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            lr_max=cfg.lr_max,
            warmup_fraction=cfg.warmup_fraction,
            fraction=cfg.fraction,
            symmetric_source=cfg.symmetric_source,
            augment=cfg.augment,
            random_state=cfg.seed,
        )
        est.config_, est.model_ = cfg, model
        return est


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Softmax layer on frozen embeddings.

    With ``encoder=None`` the inputs are embedding matrices; otherwise ``encoder``
    (a torch module or a fitted :class:`JointEmbeddingSSL`) embeds image arrays or
    the ``view`` of a :class:`TileDataset`. The encoder is never updated.
    """

    def __init__(self, encoder=None, view: str = "sparse", epochs: int = 20, lr: float = 1e-3, batch_size: int = 64, random_state: int = 0):
        self.encoder = encoder
        self.view = view
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def _encoder(self) -> Optional[torch.nn.Module]:
        if self.encoder is None:
            return None
        if isinstance(self.encoder, JointEmbeddingSSL):
            return self.encoder.encoder_for(self.view)
        return self.encoder

    def _embed(self, X) -> torch.Tensor:
        enc = self._encoder()
        if enc is None:
            X = np.asarray(X, dtype=np.float32)
            if X.ndim != 2 or not np.isfinite(X).all():
                raise ValidationError(f"expected a finite 2-D embedding matrix, got shape {X.shape}")
            return torch.from_numpy(X)
        return embed(enc, _images(X, self.view))

    def fit(self, X, y):
        y = np.asarray(y)
        self.classes_ = unique_labels(y)
        idx = np.searchsorted(self.classes_, y)
        enc = self._encoder()
        before = param_checksum(enc) if enc is not None else None
        emb = self._embed(X)
        self.head_ = fit_head(emb, idx, len(self.classes_), self.epochs, self.lr, self.batch_size, self.random_state)
        if enc is not None and param_checksum(enc) != before:
            raise AssertionError("encoder parameters changed during probe training")
        self.n_features_in_ = emb.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        return self.head_.logits(self._embed(X)).numpy()

    def predict_proba(self, X) -> np.ndarray:
        return torch.softmax(torch.from_numpy(self.decision_function(X)), dim=1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class SupervisedClassifier(ClassifierMixin, BaseEstimator):
    """End-to-end encoder plus softmax head trained with cross entropy.

    ``fit`` accepts a :class:`TileDataset` (labels taken from ``task`` when ``y``
    is omitted) or an image array with integer labels ``0..C-1``.
    """

    def __init__(
        self,
        encoder: str = "desk_cnn_small",
        task: str = "tissue",
        view: str = "dense",
        epochs: int = 10,
        batch_size: int = 64,
        lr_max: float = 1e-3,
        warmup_fraction: float = 0.1,
        augment: bool = True,
        random_state: int = 0,
    ):
        self.encoder = encoder
        self.task = task
        self.view = view
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.warmup_fraction = warmup_fraction
        self.augment = augment
        self.random_state = random_state

    def fit(self, X, y=None):
        if isinstance(X, TileDataset):
            data = X
            if y is not None:
                data = _relabel(X, self.task, np.asarray(y))
        else:
            if y is None:
                raise ValidationError("labels are required when fitting on an image array")
            imgs = check_images(X)
            data = _relabel(TileDataset(dense=imgs, sparse=imgs, tissue=np.zeros(len(imgs), dtype=np.int64)), self.task, np.asarray(y))
        self.model_, self.metrics_ = fit_supervised(
            self.task,
            EncoderSpec(name=self.encoder),
            data,
            view=self.view,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_max=self.lr_max,
            warmup_fraction=self.warmup_fraction,
            seed=self.random_state,
            use_augment=self.augment,
        )
        self.classes_ = np.arange(data.n_classes(self.task))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.probe_head().logits(embed(self.model_.encoder, _images(X, self.view))).numpy()

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return embed(self.model_.encoder, _images(X, self.view)).numpy()


def _relabel(data: TileDataset, task: str, y: np.ndarray) -> TileDataset:
    if len(y) != len(data):
        raise ValidationError(f"{len(data)} samples but {len(y)} labels")
    y = y.astype(np.int64)
    if len(y) and y.min() < 0:
        raise ValidationError("labels must be non-negative class ids")
    n = int(y.max()) + 1 if len(y) else 1
    if task == "tissue":
        return replace(data, tissue=y, n_tissue_classes=n)
    return replace(data, cell=y, n_cell_classes=n)
