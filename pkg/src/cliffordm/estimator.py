"""scikit-learn style wrapper around the trainer and model."""

from __future__ import annotations

from dataclasses import fields
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .autodiff.tensor import Tensor, no_grad
from .data.augment import preprocess_eval
from .data.dataset import ImageSet
from .data.manifest import LABEL_NAMES
from .metrics import best_threshold, evaluate, macro_auc
from .training.config import RunConfig
from .training.trainer import Trainer, derive_rng

_RUN_KEYS = tuple(f.name for f in fields(RunConfig))


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate a stack of RGB images, returning ``N x H x W x 3`` uint8.

    Float input must lie in [0, 1] and is quantized to 8 bits.
    """
    if isinstance(X, (list, tuple)):
        shapes = {np.shape(x) for x in X}
        if len(shapes) > 1:
            raise ValueError(f"{name}: images must share one size, got {sorted(shapes)[:3]}")
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"{name}: expected N x H x W x 3 images, got shape {X.shape}")
    if len(X) == 0:
        raise ValueError(f"{name}: no images")
    if X.dtype == np.uint8:
        return X
    if np.issubdtype(X.dtype, np.integer):
        if X.min() < 0 or X.max() > 255:
            raise ValueError(f"{name}: integer pixels must lie in [0, 255]")
        return X.astype(np.uint8)
    if not np.issubdtype(X.dtype, np.floating):
        raise ValueError(f"{name}: unsupported dtype {X.dtype}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name}: non-finite pixel values")
    if X.min() < 0 or X.max() > 1:
        raise ValueError(f"{name}: float pixels must lie in [0, 1]")
    return np.round(X * 255).astype(np.uint8)


def check_multilabel_targets(y, n_samples: int, num_classes: Optional[int] = None, name: str = "y") -> np.ndarray:
    """Validate an ``N x C`` 0/1 indicator matrix."""
    y = np.asarray(y)
    if y.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D label indicator matrix, got shape {y.shape}")
    if len(y) != n_samples:
        raise ValueError(f"{name}: {len(y)} rows for {n_samples} images")
    if num_classes is not None and y.shape[1] != num_classes:
        raise ValueError(f"{name}: expected {num_classes} label columns, got {y.shape[1]}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"{name}: labels must be 0/1")
    return y.astype(np.uint8)


def holdout_split(n: int, groups, fraction: float, seed: int):
    """Random group-disjoint train/validation index split."""
    groups = np.asarray(groups if groups is not None else np.arange(n))
    if len(groups) != n:
        raise ValueError("groups must have one entry per image")
    uniq = np.unique(groups)
    if len(uniq) < 2:
        raise ValueError("need at least two groups to hold out a validation split")
    rng = derive_rng(seed, "holdout")
    n_val = min(max(1, int(np.floor(fraction * len(uniq) + 0.5))), len(uniq) - 1)
    val_groups = set(rng.permutation(uniq)[:n_val].tolist())
    is_val = np.array([g in val_groups for g in groups.tolist()])
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


class CliffordMClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label image classifier with the full training protocol.

    Constructor arguments are the run-configuration keys. ``fit`` takes
    ``N x H x W x 3`` images and an ``N x C`` 0/1 matrix. Without an explicit
    validation set, ``validation_fraction`` of the groups (patients) is held
    out for EMA model selection and per-class threshold tuning.
    """

    def __init__(self, input_size=448, dim=96, num_self_blocks=6, use_energy=True, drop_path_max=0.2,
                 head_dropout=0.1, num_classes=8, lr=2e-4, weight_decay=0.08, warmup_epochs=10, epochs=200,
                 batch_size=16, accum_steps=2, grad_clip=0.5, ema_decay=0.9998, patience=30, seed=42,
                 smoothing=0.1, weight_cap=15.0, mix_enabled=True, mixup_alpha=0.3, cutmix_alpha=1.0,
                 validation_fraction=0.2, threshold="f1opt"):
        self.input_size = input_size
        self.dim = dim
        self.num_self_blocks = num_self_blocks
        self.use_energy = use_energy
        self.drop_path_max = drop_path_max
        self.head_dropout = head_dropout
        self.num_classes = num_classes
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.accum_steps = accum_steps
        self.grad_clip = grad_clip
        self.ema_decay = ema_decay
        self.patience = patience
        self.seed = seed
        self.smoothing = smoothing
        self.weight_cap = weight_cap
        self.mix_enabled = mix_enabled
        self.mixup_alpha = mixup_alpha
        self.cutmix_alpha = cutmix_alpha
        self.validation_fraction = validation_fraction
        self.threshold = threshold

    def run_config(self) -> RunConfig:
        return RunConfig(**{k: getattr(self, k) for k in _RUN_KEYS})

    def fit(self, X, y, X_val=None, y_val=None, groups=None):
        cfg = self.run_config()
        if self.threshold != "f1opt" and not (isinstance(self.threshold, float) and 0 < self.threshold < 1):
            raise ValueError(f"threshold must be 'f1opt' or a float in (0, 1), got {self.threshold!r}")
        X = check_images(X)
        y = check_multilabel_targets(y, len(X), cfg.num_classes)
        ids = [str(g) for g in groups] if groups is not None else [str(i) for i in range(len(X))]
        if X_val is None:
            if y_val is not None:
                raise ValueError("y_val given without X_val")
            tr, va = holdout_split(len(X), ids, self.validation_fraction, cfg.seed)
            X, X_val, y, y_val = X[tr], X[va], y[tr], y[va]
            ids = [ids[i] for i in tr]
            val_ids = [f"val{i}" for i in range(len(va))]
        else:
            X_val = check_images(X_val, "X_val")
            y_val = check_multilabel_targets(y_val, len(X_val), cfg.num_classes, "y_val")
            val_ids = [f"val{i}" for i in range(len(X_val))]

        trainer = Trainer(cfg)
        self.history_ = trainer.fit(ImageSet(X, y, ids), ImageSet(X_val, y_val, val_ids))
        self.model_ = trainer.best_model()
        self.classes_ = np.arange(cfg.num_classes)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        val_scores = self.predict_proba(X_val)
        self.validation_report_ = evaluate(val_scores, y_val, LABEL_NAMES[: cfg.num_classes])
        if self.threshold == "f1opt":
            self.thresholds_ = np.array([best_threshold(val_scores[:, c], y_val[:, c])[0]
                                         for c in range(cfg.num_classes)])
        else:
            self.thresholds_ = np.full(cfg.num_classes, float(self.threshold))
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def _inputs(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_images(X)
        return np.stack([preprocess_eval(im, self.input_size) for im in X])

    def decision_function(self, X) -> np.ndarray:
        """Per-class logits, ``N x C``."""
        x = self._inputs(X)
        return self.model_.predict_logits(x).astype(np.float64)

    def predict_proba(self, X) -> np.ndarray:
        """Independent per-class sigmoid probabilities, ``N x C``."""
        return 1.0 / (1.0 + np.exp(-self.decision_function(X)))

    def predict(self, X) -> np.ndarray:
        """0/1 indicator matrix using the per-class thresholds (``score >= t``)."""
        return (self.predict_proba(X) >= self.thresholds_).astype(np.uint8)

    def transform(self, X) -> np.ndarray:
        """Globally pooled, layer-normalized features, ``N x D``."""
        x = self._inputs(X)
        model = self.model_
        model.eval()
        out = []
        with no_grad():
            for i in range(0, len(x), 32):
                f = model.forward_features(Tensor(x[i : i + 32].astype(model.dtype)))
                out.append(model.head.features(f).data)
        return np.concatenate(out).astype(np.float64)

    def score(self, X, y, sample_weight=None) -> float:
        """Macro AUC-ROC over non-degenerate classes."""
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported")
        y = check_multilabel_targets(y, len(np.asarray(X)), self.num_classes)
        return macro_auc(self.predict_proba(X), y)

