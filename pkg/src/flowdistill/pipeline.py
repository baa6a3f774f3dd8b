"""End-to-end experiment wiring: split, normalize, train, predict on test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (
    FlowSeries,
    NormStats,
    Split,
    WindowBatch,
    build_neighbor_lists,
    calendar_features,
    chronological_split,
    extract_windows,
    fit_normalizer,
    make_windows,
)
from .metrics import MetricReport, evaluate_predictions
from .model import ModelConfig, predict
from .teacher import dataset_fingerprint
from .train import TrainConfig, TrainResult, train


@dataclass(frozen=True)
class SplitSpec:
    train_ratio: float = 0.1
    val_ratio: float = 0.1
    test_ratio: float = 0.1
    H_in: int = 12
    H_out: int = 12
    stride: int = 1

    @property
    def ratios(self):
        return (self.train_ratio, self.val_ratio, self.test_ratio)


@dataclass
class PreparedData:
    split: Split
    train: WindowBatch
    val: WindowBatch
    test: WindowBatch
    norm: NormStats
    fingerprint: int


@dataclass
class ExperimentResult:
    report: MetricReport
    test_pred: np.ndarray
    result: TrainResult
    data: PreparedData


def model_config_for(series: FlowSeries, spec: SplitSpec, **overrides) -> ModelConfig:
    _, _, T1, T2 = calendar_features(series)
    return ModelConfig(n_regions=series.n_regions, n_channels=series.n_channels, T1=T1, T2=T2,
                       H_in=spec.H_in, H_out=spec.H_out, **overrides)


def neighbors_for(series: FlowSeries, graph=None, K_r: int = 8, mode: str = "adjacency"):
    if mode == "literal":
        return build_neighbor_lists(None, K_r, n_regions=series.n_regions, mode="literal")
    if graph is not None and graph.adjacency is not None:
        return build_neighbor_lists(graph.adjacency, K_r)
    if series.grid_shape is not None:
        return build_neighbor_lists(K_r=K_r, grid_shape=series.grid_shape)
    return build_neighbor_lists(None, K_r, n_regions=series.n_regions, mode="literal")


def prepare(series: FlowSeries, spec: SplitSpec) -> PreparedData:
    windows = make_windows(series, spec.H_in, spec.H_out, spec.stride)
    split = chronological_split(windows, *spec.ratios, span=spec.H_in + spec.H_out)
    norm = fit_normalizer(series, split.train, spec.H_in)
    sets = [extract_windows(series, starts, spec.H_in, spec.H_out, split=name)
            for name, starts in zip(("train", "val", "test"), split)]
    fp = dataset_fingerprint(series.meta_bytes, spec.ratios, split.train)
    return PreparedData(split, *sets, norm=norm, fingerprint=fp)


def run_experiment(series: FlowSeries, spec: SplitSpec, train_cfg: TrainConfig, *, neighbor_lists,
                   teacher_provider=None, model_overrides=None, prepared: PreparedData | None = None,
                   eval_neighbor_lists=None) -> ExperimentResult:
    data = prepared or prepare(series, spec)
    model_cfg = model_config_for(series, spec, **(model_overrides or {}))
    teacher = None
    if train_cfg.weights.needs_teacher:
        if teacher_provider is None:
            raise ValueError("teacher required: the teacher-bounded term is active")
        teacher = teacher_provider(data.train)
    result = train(data.train, data.val, model_cfg, train_cfg, norm=data.norm,
                   neighbor_lists=neighbor_lists, teacher=teacher)
    best = result.best
    test_pred = predict(data.test, best.params, model_cfg, data.norm)
    report = evaluate_predictions(test_pred, data.test.targets,
                                  eval_neighbor_lists if eval_neighbor_lists is not None else neighbor_lists)
    return ExperimentResult(report, test_pred, result, data)
