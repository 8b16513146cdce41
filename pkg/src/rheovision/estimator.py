"""Scikit-learn style estimator facade over the training pipeline.

``FreshPropertyRegressor`` follows the sklearn conventions (constructor only
stores hyperparameters, ``fit`` returns self, fitted attributes carry a
trailing underscore, ``get_params``/``set_params`` work through
``BaseEstimator``), so the model composes with the wider ecosystem; samples
are the pipeline's input-set objects rather than a flat feature matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from . import datapipe, model, trainer
from .exceptions import InputError
from .protocol import parse_combination


def validate_input_sets(X, channels=None, require_targets: bool = True):
    """Check a sequence of input sets is consistent and model-ready."""
    if len(X) == 0:
        raise InputError("need at least one input set")
    shape = X[0].image.shape[1:]
    for i, s in enumerate(X):
        if s.image.ndim != 3:
            raise InputError(f"set {i}: image must be (C, H, W), got {s.image.shape}")
        if s.image.shape[1:] != shape:
            raise InputError(f"set {i}: image size {s.image.shape[1:]} differs from {shape}")
        if len(s.channels) != s.image.shape[0]:
            raise InputError(f"set {i}: {len(s.channels)} channel names for "
                             f"{s.image.shape[0]} image planes")
        if channels is not None and any(ch not in s.channels for ch in channels):
            raise InputError(f"set {i}: channels {s.channels} missing some of {channels}")
        if not np.all(np.isfinite(s.image)):
            raise InputError(f"set {i}: non-finite image values")
        if s.delta_t.shape != (2,):
            raise InputError(f"set {i}: delta_t must have 2 entries")
        if s.mix.shape != (18,):
            raise InputError(f"set {i}: mix vector must have 18 entries")
        if require_targets and (s.targets.shape != (3,) or not s.target_mask[0]):
            raise InputError(f"set {i}: needs 3 targets with the first unmasked")
    return shape


class FreshPropertyRegressor(BaseEstimator, RegressorMixin):
    """Predicts (slump flow diameter, yield stress, plastic viscosity).

    Wraps network construction, per-category normalization fitted on the
    training data, the augmented training loop and best-epoch selection on a
    validation split. ``predict`` returns denormalized values in original
    units (cm, Pa, Pa*s).
    """

    def __init__(self, combination: str = "O+D+m+OF", image_size: int = 64,
                 learning_rate: float = 5e-3, momentum: float = 0.99,
                 weight_decay: float = 1e-3, epochs: int = 5, batch_size: int = 16,
                 seed: int = 0, conv_channels=None):
        self.combination = combination
        self.image_size = image_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.conv_channels = conv_channels

    def _model_config(self, n_channels: int, mix_dim: int) -> model.ModelConfig:
        if self.conv_channels is not None:
            width = 0
            base = model.ModelConfig(input_size=(self.image_size, self.image_size),
                                     conv_channels=tuple(self.conv_channels))
            oh, ow = base.conv_output_size()
            emb = base.conv_channels[-1] * oh * ow
            width = emb + 2 + mix_dim
            return model.ModelConfig(input_size=(self.image_size, self.image_size),
                                     in_channels=n_channels,
                                     conv_channels=tuple(self.conv_channels),
                                     embedding_len=emb, mix_dim=mix_dim,
                                     fc_sizes=model.default_fc_sizes(width))
        if self.image_size >= 512:
            base = model.full_scale_config()
        else:
            base = model.desk_config(self.image_size)
        return model.adapt_config(base, n_channels, mix_dim)

    def _train_config(self, seed=None) -> trainer.TrainConfig:
        return trainer.TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                                   weight_decay=self.weight_decay, epochs=self.epochs,
                                   batch_size=self.batch_size,
                                   seed=self.seed if seed is None else seed)

    def fit(self, X, y=None, validation=None):
        """Train on input sets X; epoch selection uses ``validation`` (or X)."""
        combo = parse_combination(self.combination)
        validate_input_sets(X, channels=combo.channels)
        val = validation if validation is not None else X
        validate_input_sets(val, channels=combo.channels)

        train_sets = datapipe.select_channels(list(X), combo.channels)
        val_sets = datapipe.select_channels(list(val), combo.channels)
        config = self._model_config(len(combo.channels), combo.mix_dim)
        result = trainer.train_fold(train_sets, val_sets, config, self._train_config(),
                                    mix_idx=combo.mix_indices())
        self.combo_ = combo
        self.model_ = result.model
        self.norm_stats_ = result.stats
        self.reports_ = result.reports
        self.best_epoch_ = result.best_epoch
        self.optimizer_ = result.optimizer
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise InputError("estimator is not fitted")
        validate_input_sets(X, channels=self.combo_.channels, require_targets=False)
        sets = datapipe.select_channels(list(X), self.combo_.channels)
        return trainer.predict_sets(self.model_, sets, self.norm_stats_,
                                    self.combo_.mix_indices())

    def save(self, path, extra_meta: dict | None = None) -> None:
        if not hasattr(self, "model_"):
            raise InputError("estimator is not fitted")
        meta = {"combination": self.combination, "best_epoch": str(self.best_epoch_)}
        meta.update(self.norm_stats_.to_meta())
        if extra_meta:
            meta.update(extra_meta)
        model.save_checkpoint(self.model_, path, optimizer=self.optimizer_, meta=meta)

    @classmethod
    def load(cls, path) -> "FreshPropertyRegressor":
        bundle = model.load_checkpoint(path)
        combination = bundle.meta.get("combination", "O+D+m+OF")
        est = cls(combination=combination,
                  image_size=bundle.model.config.input_size[0])
        est.combo_ = parse_combination(combination)
        est.model_ = bundle.model
        est.norm_stats_ = datapipe.NormStats.from_meta(bundle.meta)
        est.reports_ = []
        est.best_epoch_ = int(bundle.meta.get("best_epoch", "0"))
        est.optimizer_ = None
        est.meta_ = bundle.meta
        return est
