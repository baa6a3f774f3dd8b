"""Forecast error metrics and smoothness diagnostics (all in original flow units)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, DimensionError


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ContractError("metrics need at least one value")
    return pred, target


def compute_metrics(pred, target) -> tuple[float, float]:
    """``(MAE, RMSE)`` over every element."""
    pred, target = _pair(pred, target)
    err = np.abs(pred - target)
    return float(np.mean(err)), _rms(err)


def _rms(err: np.ndarray, axis=None):
    """Root mean square scaled by the largest error so squares neither underflow nor overflow."""
    top = np.max(err, axis=axis, keepdims=True)
    safe = np.where(top > 0, top, 1.0)
    out = np.squeeze(safe, axis=axis) * np.sqrt(np.mean((err / safe) ** 2, axis=axis))
    return float(out) if axis is None else out


def horizon_breakdown(pred, target, axis: int = 2):
    """Per output step ``(mae, rmse, count)`` arrays along ``axis`` (the horizon axis)."""
    pred, target = _pair(pred, target)
    err = np.moveaxis(pred - target, axis, 0).reshape(pred.shape[axis], -1)
    mae = np.abs(err).mean(axis=1)
    rmse = _rms(np.abs(err), axis=1)
    count = np.full(err.shape[0], err.shape[1])
    return mae, rmse, count


def volume_bucket_breakdown(pred, target, edges=None):
    """Metrics for regions grouped by their mean target flow.

    ``pred``/``target`` are ``(B, N, H, C)``.  ``edges`` are bucket
    boundaries (lowest bucket closed below, highest closed above); by default
    the quartiles of the region means.  Empty buckets report ``None`` metrics.
    """
    pred, target = _pair(pred, target)
    region_mean = target.mean(axis=(0, 2, 3))
    if edges is None:
        edges = np.quantile(region_mean, [0.0, 0.25, 0.5, 0.75, 1.0])
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ContractError("bucket edges must be a strictly increasing sequence of at least two values")
    rows = []
    for i in range(len(edges) - 1):
        lo, hi = edges[i], edges[i + 1]
        last = i == len(edges) - 2
        member = (region_mean >= lo) & ((region_mean <= hi) if last else (region_mean < hi))
        n_reg = int(member.sum())
        if n_reg:
            mae, rmse = compute_metrics(pred[:, member], target[:, member])
            count = int(pred[:, member].size)
        else:
            mae = rmse = None
            count = 0
        rows.append({"lo": float(lo), "hi": float(hi), "mae": mae, "rmse": rmse,
                     "n_regions": n_reg, "count": count})
    return rows


def roughness_metrics(pred, neighbor_lists) -> tuple[float, float]:
    """``(spatial TV, temporal TV)`` of a ``(B, N, H, C)`` prediction.

    Spatial TV sums |difference| over each region's neighbor list and
    averages over (b, s, t, c); temporal TV averages |y_{t+1} - y_t|.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 4:
        raise DimensionError(f"roughness needs (B, N, H, C) predictions, got {pred.shape}")
    pairs = [(s, j) for s, nb in enumerate(neighbor_lists) for j in nb]
    if pairs:
        src, dst = np.array(pairs).T
        spatial = float(np.abs(pred[:, src] - pred[:, dst]).sum() / pred.size)
    else:
        spatial = 0.0
    temporal = float(np.abs(np.diff(pred, axis=2)).mean()) if pred.shape[2] > 1 else 0.0
    return spatial, temporal


@dataclass
class MetricReport:
    mae: float
    rmse: float
    horizon_mae: list[float]
    horizon_rmse: list[float]
    horizon_count: list[int]
    buckets: list[dict] = field(default_factory=list)
    spatial_tv: float | None = None
    temporal_tv: float | None = None

    def to_dict(self):
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "horizon": [
                {"step": i + 1, "mae": m, "rmse": r, "count": c}
                for i, (m, r, c) in enumerate(zip(self.horizon_mae, self.horizon_rmse, self.horizon_count))
            ],
            "buckets": self.buckets,
            "spatial_tv": self.spatial_tv,
            "temporal_tv": self.temporal_tv,
        }


def evaluate_predictions(pred, target, neighbor_lists=None, edges=None) -> MetricReport:
    mae, rmse = compute_metrics(pred, target)
    h_mae, h_rmse, h_count = horizon_breakdown(pred, target)
    weighted = float(np.sum(h_mae * h_count) / np.sum(h_count))
    if not np.isclose(weighted, mae, rtol=1e-6, atol=1e-12):
        raise ContractError("horizon aggregation identity violated")
    spatial = temporal = None
    if neighbor_lists is not None:
        spatial, temporal = roughness_metrics(pred, neighbor_lists)
    return MetricReport(
        mae, rmse, h_mae.tolist(), h_rmse.tolist(), h_count.tolist(),
        volume_bucket_breakdown(pred, target, edges), spatial, temporal,
    )
