"""Experiment harnesses: training-ratio sweeps, ablations, latency scaling and report files."""

from __future__ import annotations

import csv
import io
import json
import platform
import statistics
import time
import tracemalloc
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import SynthConfig, extract_windows, generate_synthetic, make_windows
from .losses import ABLATIONS
from .metrics import roughness_metrics
from .model import init_params, predict
from .pipeline import SplitSpec, model_config_for, neighbors_for, run_experiment
from .train import TrainConfig


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


def training_ratio_sweep(series, neighbor_lists, ratios, train_cfg: TrainConfig, seeds, *,
                         teacher_for_seed=None, model_overrides=None, spec: SplitSpec = SplitSpec()):
    """Train and test once per (ratio, seed); validation and test ratios stay fixed.

    Returns ``{"rows": [...], "summary": [...], "table": csv_text}`` where
    the table follows a model x (ratio MAE, ratio RMSE) layout.
    """
    ratios = [float(r) for r in ratios]
    if any(not 0 < r < 1 for r in ratios):
        raise ValueError("training ratios must lie in (0, 1)")
    rows = []
    for ratio in ratios:
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed)
            provider = teacher_for_seed(seed) if teacher_for_seed else None
            res = run_experiment(series, replace(spec, train_ratio=ratio), cfg, neighbor_lists=neighbor_lists,
                                 teacher_provider=provider, model_overrides=model_overrides)
            rows.append({"ratio": ratio, "seed": seed, "mae": res.report.mae, "rmse": res.report.rmse,
                         "epochs": len(res.result.log)})
    summary = []
    for ratio in ratios:
        cell = [r for r in rows if r["ratio"] == ratio]
        mae_m, mae_s = _mean_std([r["mae"] for r in cell])
        rmse_m, rmse_s = _mean_std([r["rmse"] for r in cell])
        summary.append({"ratio": ratio, "mae_mean": mae_m, "mae_std": mae_s,
                        "rmse_mean": rmse_m, "rmse_std": rmse_s, "seeds": len(cell)})
    return {"rows": rows, "summary": summary, "table": ratio_table(summary)}


def ratio_table(summary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["Model"]
    for s in summary:
        pct = f"{round(100 * s['ratio'])}%"
        header += [f"{pct} MAE", f"{pct} RMSE"]
    w.writerow(header)
    w.writerow(["FlowDistill"] + [f"{v:.2f}" for s in summary for v in (s["mae_mean"], s["rmse_mean"])])
    w.writerow(["FlowDistill (std)"] + [f"{v:.2f}" for s in summary for v in (s["mae_std"], s["rmse_std"])])
    return buf.getvalue()


def ablation_train_config(train_cfg: TrainConfig, variant: str) -> TrainConfig:
    cfg = replace(train_cfg, weights=train_cfg.weights.ablate(variant))
    if variant == "w/o-IB":
        cfg = replace(cfg, stochastic_latent=False)
    return cfg


def ablation_suite(series, neighbor_lists, train_cfg: TrainConfig, seeds, *, teacher_for_seed=None,
                   model_overrides=None, spec: SplitSpec = SplitSpec(), variants=ABLATIONS):
    """One training run per (variant, seed); rows carry test metrics and roughness."""
    rows = []
    for variant in variants:
        for seed in seeds:
            cfg = replace(ablation_train_config(train_cfg, variant), seed=seed)
            provider = teacher_for_seed(seed) if (teacher_for_seed and cfg.weights.needs_teacher) else None
            res = run_experiment(series, spec, cfg, neighbor_lists=neighbor_lists,
                                 teacher_provider=provider, model_overrides=model_overrides)
            spatial, temporal = roughness_metrics(res.test_pred, neighbor_lists)
            rows.append({"variant": variant, "seed": seed, "mae": res.report.mae, "rmse": res.report.rmse,
                         "spatial_tv": spatial, "temporal_tv": temporal, "epochs": len(res.result.log)})
    summary = []
    for variant in variants:
        cell = [r for r in rows if r["variant"] == variant]
        entry = {"variant": variant, "seeds": len(cell)}
        for key in ("mae", "rmse", "spatial_tv", "temporal_tv"):
            vals = [r[key] for r in cell]
            entry[f"{key}_mean"], entry[f"{key}_std"] = _mean_std(vals)
            entry[f"{key}_median"] = float(np.median(vals))
        summary.append(entry)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Variant", "MAE", "RMSE"])
    for s in summary:
        w.writerow([s["variant"], f"{s['mae_mean']:.2f}", f"{s['rmse_mean']:.2f}"])
    return {"rows": rows, "summary": summary, "table": buf.getvalue()}


# ---------------------------------------------------------------- latency


def _time_predict(batch, params, cfg, norm, repetitions, batch_size):
    predict(batch, params, cfg, norm, batch_size=batch_size)  # warm-up
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        predict(batch, params, cfg, norm, batch_size=batch_size)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def _peak_memory(batch, params, cfg, norm, batch_size):
    tracemalloc.start()
    try:
        predict(batch, params, cfg, norm, batch_size=batch_size)
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def fit_growth_exponent(sizes, latencies) -> float:
    """Least-squares slope of log(latency) against log(size)."""
    slope, _ = np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(latencies, float)), 1)
    return float(slope)


def scaling_benchmark(base_regions: int = 16, region_factors=(1, 2, 4), test_multiples=(1, 2, 3, 4, 5),
                      repetitions: int = 5, n_windows: int = 64, batch_size: int = 64, seed: int = 0,
                      model_overrides=None, spec: SplitSpec = SplitSpec()):
    """Median inference latency versus test-set size and region count.

    Parameters are freshly initialized; latency does not depend on their values.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    model_overrides = model_overrides or {}
    span = spec.H_in + spec.H_out
    rows = []

    def setup(n_regions):
        series, _, _ = generate_synthetic(SynthConfig(n_regions=n_regions, n_steps=n_windows + span - 1, seed=seed))
        cfg = model_config_for(series, spec, **model_overrides)
        batch = extract_windows(series, make_windows(series, spec.H_in, spec.H_out), spec.H_in, spec.H_out)
        return cfg, batch, init_params(cfg, seed)

    cfg, base_batch, params = setup(base_regions)
    for k in test_multiples:
        batch = base_batch.tile(k)
        latency = _time_predict(batch, params, cfg, None, repetitions, batch_size)
        rows.append({"axis": "test_size", "multiple": k, "regions": base_regions, "windows": len(batch),
                     "latency_s": latency, "peak_bytes": _peak_memory(batch, params, cfg, None, batch_size)})
    region_lat = []
    for f in region_factors:
        cfg_f, batch_f, params_f = setup(base_regions * f)
        latency = _time_predict(batch_f, params_f, cfg_f, None, repetitions, batch_size)
        region_lat.append(latency)
        rows.append({"axis": "regions", "multiple": f, "regions": base_regions * f, "windows": len(batch_f),
                     "latency_s": latency, "peak_bytes": _peak_memory(batch_f, params_f, cfg_f, None, batch_size)})
    test_lat = {r["multiple"]: r["latency_s"] for r in rows if r["axis"] == "test_size"}
    result = {
        "rows": rows,
        "region_exponent": fit_growth_exponent([base_regions * f for f in region_factors], region_lat)
        if len(region_factors) > 1 else None,
        "test_size_ratio_2x": test_lat[2] / test_lat[1] if 1 in test_lat and 2 in test_lat else None,
        "repetitions": repetitions,
        "unstable": repetitions == 1,
    }
    if result["unstable"]:
        result["warning"] = "repetitions=1: single-sample latency measurement is unstable"
    return result


# ---------------------------------------------------------------- reports


def environment_info() -> dict:
    from . import __version__

    info = time.get_clock_info("perf_counter")
    return {
        "timer": {"name": "time.perf_counter", "resolution_s": info.resolution, "monotonic": info.monotonic},
        "build": {"flowdistill": __version__, "numpy": np.__version__, "python": platform.python_version(),
                  "platform": platform.platform()},
    }


def write_report(out_dir, config: dict, rows: list[dict], extra: dict | None = None, name: str = "report"):
    """Write ``<name>.json`` ({config, rows, environment, ...}) and ``<name>.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"config": config, "rows": rows, "environment": environment_info()}
    doc.update(extra or {})
    (out_dir / f"{name}.json").write_text(json.dumps(doc, indent=2, default=_jsonable), encoding="utf-8")
    fields = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(out_dir / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return out_dir / f"{name}.json"


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


__all__ = [
    "training_ratio_sweep",
    "ablation_suite",
    "ablation_train_config",
    "scaling_benchmark",
    "fit_growth_exponent",
    "write_report",
    "environment_info",
    "ratio_table",
    "neighbors_for",
]
