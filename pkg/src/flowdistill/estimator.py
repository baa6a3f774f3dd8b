"""Scikit-learn style wrapper around the student model."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import FlowScaler, WindowBatch
from .exceptions import BoundsError, ContractError, DimensionError
from .losses import LossWeights
from .metrics import compute_metrics
from .model import ModelConfig, predict
from .train import TrainConfig, train


def check_window_batch(batch, *, n_regions=None, n_channels=None, H_in=None, H_out=None) -> WindowBatch:
    """Validate a :class:`WindowBatch` and, optionally, its dimensions against a fitted model."""
    if not isinstance(batch, WindowBatch):
        raise ContractError(f"expected a WindowBatch, got {type(batch).__name__}")
    if batch.inputs.ndim != 4 or batch.targets.ndim != 4:
        raise DimensionError("inputs and targets must be 4-D (B, N, H, C)")
    B, N, h_in, h_out, C = batch.shape
    if batch.targets.shape[:2] != (B, N) or batch.targets.shape[3] != C:
        raise DimensionError(f"inputs {batch.inputs.shape} and targets {batch.targets.shape} disagree")
    if batch.tod_idx.shape != (B, h_in) or batch.dow_idx.shape != (B, h_in):
        raise DimensionError("calendar indices must be (B, H_in)")
    expected = {"n_regions": (n_regions, N), "n_channels": (n_channels, C), "H_in": (H_in, h_in),
                "H_out": (H_out, h_out)}
    for name, (want, got) in expected.items():
        if want is not None and want != got:
            raise DimensionError(f"{name}: model expects {want}, batch has {got}")
    if not (np.isfinite(batch.inputs).all() and np.isfinite(batch.targets).all()):
        raise ContractError("window values must be finite")
    return batch


def check_teacher(teacher, batch: WindowBatch) -> np.ndarray:
    teacher = np.asarray(teacher, dtype=np.float32)
    if teacher.shape != batch.targets.shape:
        raise DimensionError(f"teacher shape {teacher.shape} != target shape {batch.targets.shape}")
    return teacher


class FlowDistillRegressor(RegressorMixin, BaseEstimator):
    """Student forecaster with the estimator API.

    ``fit`` takes training windows (tagged ``split="train"``), optional
    teacher predictions aligned with them, and a validation batch for early
    stopping. ``predict`` returns flows in original units.
    """

    def __init__(self, d=64, L=3, K=64, steps_per_day=None, latent_noise_mode="std", activation="relu",
                 lr0=0.0055, decay=0.6, decay_every=5, batch_size=80, max_epochs=50, patience=10, clip_norm=5.0,
                 stochastic_latent=True, lambda_tbl=0.10, delta=10.0, lambda_kl=1e-3, lambda_spa=0.6,
                 lambda_tem=0.35, H=12, K_r=8, granularity="element", tbl_variant="paper-literal", seed=0):
        self.d = d
        self.L = L
        self.K = K
        self.steps_per_day = steps_per_day
        self.latent_noise_mode = latent_noise_mode
        self.activation = activation
        self.lr0 = lr0
        self.decay = decay
        self.decay_every = decay_every
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.clip_norm = clip_norm
        self.stochastic_latent = stochastic_latent
        self.lambda_tbl = lambda_tbl
        self.delta = delta
        self.lambda_kl = lambda_kl
        self.lambda_spa = lambda_spa
        self.lambda_tem = lambda_tem
        self.H = H
        self.K_r = K_r
        self.granularity = granularity
        self.tbl_variant = tbl_variant
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        weights = LossWeights(lambda_tbl=self.lambda_tbl, delta=self.delta, lambda_kl=self.lambda_kl,
                              lambda_spa=self.lambda_spa, lambda_tem=self.lambda_tem, H=self.H, K_r=self.K_r,
                              granularity=self.granularity, tbl_variant=self.tbl_variant)
        return TrainConfig(lr0=self.lr0, decay=self.decay, decay_every=self.decay_every,
                           batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
                           seed=self.seed, clip_norm=self.clip_norm, stochastic_latent=self.stochastic_latent,
                           weights=weights)

    def fit(self, X, y=None, *, teacher=None, eval_set=None, neighbor_lists=None):
        """Train on windows ``X``; ``y`` defaults to ``X.targets``."""
        X = check_window_batch(X)
        if y is not None:
            y = np.asarray(y)
            if y.shape != X.targets.shape:
                raise DimensionError(f"y shape {y.shape} != {X.targets.shape}")
            X = replace(X, targets=y)
        if eval_set is None:
            raise ContractError("eval_set (validation windows) is required for early stopping")
        B, N, H_in, H_out, C = X.shape
        eval_set = check_window_batch(eval_set, n_regions=N, n_channels=C, H_in=H_in, H_out=H_out)
        cfg = self._train_config()
        if cfg.weights.needs_teacher:
            if teacher is None:
                raise ContractError("teacher required: the teacher-bounded term is active")
            teacher = check_teacher(teacher, X)
        if cfg.weights.effective["spa"] > 0 and neighbor_lists is None:
            raise ContractError("neighbor_lists required when lambda_spa > 0")
        T1 = self.steps_per_day
        if T1 is None:
            T1 = int(max(X.tod_idx.max(), eval_set.tod_idx.max())) + 1
        self.model_config_ = ModelConfig(n_regions=N, n_channels=C, T1=T1, T2=7, d=self.d, L=self.L, K=self.K,
                                         H_in=H_in, H_out=H_out, latent_noise_mode=self.latent_noise_mode,
                                         activation=self.activation)
        self.scaler_ = FlowScaler().fit(X.inputs)
        result = train(X, eval_set, self.model_config_, cfg, norm=self.scaler_.stats_,
                       neighbor_lists=neighbor_lists, teacher=teacher)
        self.params_ = result.best.params
        self.training_log_ = result.log
        self.best_val_mae_ = result.best.best_val_mae
        self.n_features_in_ = C
        return self

    def predict(self, X):
        check_is_fitted(self, ["params_", "model_config_"])
        cfg = self.model_config_
        X = check_window_batch(X, n_regions=cfg.n_regions, n_channels=cfg.n_channels, H_in=cfg.H_in, H_out=cfg.H_out)
        if X.tod_idx.size and (X.tod_idx.max() >= cfg.T1 or X.tod_idx.min() < 0):
            raise BoundsError(f"time-of-day index outside [0, {cfg.T1})")
        return predict(X, self.params_, cfg, self.scaler_.stats_)

    def score(self, X, y=None, sample_weight=None):
        """Negative test MAE in flow units (higher is better)."""
        target = X.targets if y is None else np.asarray(y)
        mae, _ = compute_metrics(self.predict(X), target)
        return -mae
