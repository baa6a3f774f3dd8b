"""Traffic-flow datasets: ingestion, synthesis, calendar features, windows and splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ContractError, IngestionError, SplitError
from .rng import make_rng

DAY_MINUTES = 1440
DAYS_PER_WEEK = 7
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class DatasetMeta:
    """Parsed contents of a flat ``key = value`` meta file."""

    regions: int
    interval_minutes: int
    start_time: pd.Timestamp
    channels: tuple[str, ...]
    steps: int | None = None
    grid_rows: int | None = None
    grid_cols: int | None = None
    adjacency_path: str | None = None
    raw: bytes = b""

    @property
    def grid_shape(self):
        if self.grid_rows is None or self.grid_cols is None:
            return None
        return (self.grid_rows, self.grid_cols)


@dataclass(frozen=True, eq=False)
class FlowSeries:
    values: np.ndarray  # (N, T, C)
    start_time: pd.Timestamp
    interval_minutes: int
    channels: tuple[str, ...]
    grid_shape: tuple[int, int] | None = None
    meta_bytes: bytes = b""
    missing_cells: int = 0
    rejected_rows: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).view()
        if v.ndim != 3:
            raise ContractError(f"flow values must be (N, T, C), got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ContractError("flow values must be finite")
        if (v < 0).any():
            raise ContractError("flow values must be non-negative")
        if DAY_MINUTES % self.interval_minutes:
            raise ContractError(f"interval_minutes={self.interval_minutes} does not divide 1440")
        if len(self.channels) != v.shape[2]:
            raise ContractError(f"{len(self.channels)} channel names for {v.shape[2]} channels")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n_regions(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def timestamp(self, t: int) -> pd.Timestamp:
        return self.start_time + pd.Timedelta(minutes=self.interval_minutes * int(t))


@dataclass(frozen=True, eq=False)
class RegionGraph:
    adjacency: np.ndarray | None
    neighbor_lists: list[list[int]]


@dataclass(frozen=True, eq=False)
class WindowBatch:
    """Model-ready windows in original flow units.

    ``split`` records where the windows came from; training refuses anything
    not tagged ``"train"``.
    """

    inputs: np.ndarray  # (B, N, H_in, C)
    targets: np.ndarray  # (B, N, H_out, C)
    tod_idx: np.ndarray  # (B, H_in)
    dow_idx: np.ndarray  # (B, H_in)
    window_start: np.ndarray  # (B,)
    split: str = "all"

    def __len__(self):
        return int(self.inputs.shape[0])

    @property
    def shape(self):
        B, N, H_in, C = self.inputs.shape
        return B, N, H_in, self.targets.shape[2], C

    def subset(self, idx) -> WindowBatch:
        idx = np.asarray(idx, dtype=np.int64)
        return WindowBatch(
            self.inputs[idx],
            self.targets[idx],
            self.tod_idx[idx],
            self.dow_idx[idx],
            self.window_start[idx],
            self.split,
        )

    def tile(self, times: int) -> WindowBatch:
        """Repeat the batch ``times`` times along the window axis (benchmark helper)."""
        idx = np.tile(np.arange(len(self)), times)
        return self.subset(idx)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)

    def apply(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def invert(self, x):
        return np.asarray(x) * self.std + self.mean


@dataclass(frozen=True)
class SynthConfig:
    n_regions: int = 16
    n_steps: int = 2000
    n_channels: int = 2
    interval_minutes: int = 30
    seed: int = 0
    amplitude: float = 0.6
    weekend_factor: float = 0.7
    mixing: float = 0.3
    noise_std: float = 2.0
    base_rates: tuple[float, ...] | None = None
    base_low: float = 10.0
    base_high: float = 60.0
    grid_rows: int | None = None
    grid_cols: int | None = None
    start_time: str = "2021-01-01T00:00:00+00:00"

    def __post_init__(self):
        if min(self.amplitude, self.weekend_factor, self.noise_std, self.base_low, self.base_high) < 0:
            raise ContractError("synthetic amplitudes and rates must be non-negative")
        if not 0 <= self.mixing < 1:
            raise ContractError(f"mixing must lie in [0, 1), got {self.mixing}")
        if self.base_rates is not None and len(self.base_rates) != self.n_regions:
            raise ContractError("base_rates needs one entry per region")


class Split(NamedTuple):
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


# ---------------------------------------------------------------- meta and CSV


def parse_meta(text: str | bytes) -> DatasetMeta:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    entries = {}
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise IngestionError(f"meta line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        entries[key] = value
    known = {"regions", "interval_minutes", "start_time", "channels", "steps",
             "grid_rows", "grid_cols", "adjacency_path"}
    unknown = set(entries) - known
    if unknown:
        raise IngestionError(f"unknown meta keys: {sorted(unknown)}")
    missing = {"regions", "interval_minutes", "start_time"} - set(entries)
    if missing:
        raise IngestionError(f"meta is missing keys: {sorted(missing)}")

    def opt_int(key):
        return int(entries[key]) if key in entries else None

    try:
        return DatasetMeta(
            regions=int(entries["regions"]),
            interval_minutes=int(entries["interval_minutes"]),
            start_time=pd.Timestamp(entries["start_time"]).tz_localize("UTC")
            if pd.Timestamp(entries["start_time"]).tzinfo is None
            else pd.Timestamp(entries["start_time"]),
            channels=tuple(c.strip() for c in entries.get("channels", "inflow").split(",")),
            steps=opt_int("steps"),
            grid_rows=opt_int("grid_rows"),
            grid_cols=opt_int("grid_cols"),
            adjacency_path=entries.get("adjacency_path"),
            raw=raw,
        )
    except ValueError as exc:
        raise IngestionError(f"bad meta value: {exc}") from None


def read_meta(path) -> DatasetMeta:
    return parse_meta(Path(path).read_bytes())


def format_meta(series: FlowSeries) -> str:
    lines = [
        f"regions = {series.n_regions}",
        f"interval_minutes = {series.interval_minutes}",
        f"start_time = {series.start_time.isoformat()}",
        f"channels = {','.join(series.channels)}",
        f"steps = {series.n_steps}",
    ]
    if series.grid_shape is not None:
        lines += [f"grid_rows = {series.grid_shape[0]}", f"grid_cols = {series.grid_shape[1]}"]
    return "\n".join(lines) + "\n"


def ingest_csv(path, meta: DatasetMeta) -> FlowSeries:
    """Read ``region_id,timestamp,<channel>...`` rows into a dense FlowSeries.

    Missing (region, step) cells become 0 and are counted in ``missing_cells``;
    rows before the start or past ``meta.steps`` are counted in ``rejected_rows``.
    """
    df = pd.read_csv(path, float_precision="round_trip")
    expected = ["region_id", "timestamp", *meta.channels]
    if list(df.columns) != expected:
        raise IngestionError(f"expected header {','.join(expected)}, got {','.join(map(str, df.columns))}")
    region = df["region_id"].to_numpy()
    bad_region = (region < 0) | (region >= meta.regions)
    if bad_region.any():
        i = int(np.flatnonzero(bad_region)[0])
        raise IngestionError(
            f"row {i + 2}: unknown region id {region[i]} (expected 0..{meta.regions - 1})"
        )
    try:
        ts = pd.to_datetime(df["timestamp"], utc=True)
    except (ValueError, TypeError) as exc:
        raise IngestionError(f"unparseable timestamp: {exc}") from None
    offset_min = (ts - meta.start_time).dt.total_seconds().to_numpy() / 60.0
    step_f = offset_min / meta.interval_minutes
    step = np.floor(step_f).astype(np.int64)
    misaligned = step_f != step
    if misaligned.any():
        i = int(np.flatnonzero(misaligned)[0])
        raise IngestionError(f"row {i + 2}: timestamp {df['timestamp'][i]} is not on the interval grid")
    n_steps = meta.steps if meta.steps is not None else int(step.max()) + 1
    keep = (step >= 0) & (step < n_steps)
    rejected = int((~keep).sum())
    values = df[list(meta.channels)].to_numpy(dtype=np.float64)[keep]
    region, step = region[keep].astype(np.int64), step[keep]

    cell = region * n_steps + step
    order = np.argsort(cell, kind="stable")
    cell_s, values_s = cell[order], values[order]
    dup = np.flatnonzero(cell_s[1:] == cell_s[:-1])
    if dup.size:
        conflict = dup[(values_s[dup + 1] != values_s[dup]).any(axis=1)]
        if conflict.size:
            c = int(cell_s[conflict[0]])
            raise IngestionError(
                f"conflicting duplicate values for region {c // n_steps} at step {c % n_steps}"
            )
    out = np.zeros((meta.regions, n_steps, len(meta.channels)))
    filled = np.zeros((meta.regions, n_steps), dtype=bool)
    out[region, step] = values
    filled[region, step] = True
    return FlowSeries(
        out,
        meta.start_time,
        meta.interval_minutes,
        meta.channels,
        grid_shape=meta.grid_shape,
        meta_bytes=meta.raw,
        missing_cells=int((~filled).sum()),
        rejected_rows=rejected,
    )


def load_dataset(data_dir) -> tuple[FlowSeries, RegionGraph | None]:
    """Load ``flows.csv`` and ``meta.txt`` (plus an optional adjacency CSV) from a directory."""
    data_dir = Path(data_dir)
    meta = read_meta(data_dir / "meta.txt")
    series = ingest_csv(data_dir / "flows.csv", meta)
    graph = None
    if meta.adjacency_path:
        adj = np.loadtxt(data_dir / meta.adjacency_path, delimiter=",", ndmin=2)
        graph = make_region_graph(adj)
    return series, graph


def write_dataset(series: FlowSeries, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    N, T, C = series.values.shape
    stamps = pd.date_range(series.start_time, periods=T, freq=f"{series.interval_minutes}min")
    frame = pd.DataFrame(
        {
            "region_id": np.repeat(np.arange(N), T),
            "timestamp": np.tile(stamps.strftime("%Y-%m-%dT%H:%M:%SZ"), N),
        }
    )
    for c, name in enumerate(series.channels):
        frame[name] = series.values[:, :, c].reshape(-1)
    frame.to_csv(out_dir / "flows.csv", index=False)
    meta_text = series.meta_bytes or format_meta(series).encode()
    (out_dir / "meta.txt").write_bytes(meta_text)
    return out_dir


# ---------------------------------------------------------------- calendar and windows


def calendar_features(series: FlowSeries):
    """Time-of-day and day-of-week indices for every step.

    Returns ``(tod_idx, dow_idx, T1, T2)`` where ``T1`` is the number of
    intervals per day and ``T2 == 7``; Monday is weekday 0.
    """
    interval = series.interval_minutes
    if DAY_MINUTES % interval:
        raise ContractError(f"interval_minutes={interval} does not divide 1440")
    T1 = DAY_MINUTES // interval
    start = series.start_time
    start_min = start.hour * 60 + start.minute
    minutes = start_min + interval * np.arange(series.n_steps, dtype=np.int64)
    tod = (start_min // interval + np.arange(series.n_steps, dtype=np.int64)) % T1
    dow = (start.weekday() + minutes // DAY_MINUTES) % DAYS_PER_WEEK
    return tod, dow, T1, DAYS_PER_WEEK


def make_windows(series_or_steps, H_in: int, H_out: int, stride: int = 1) -> np.ndarray:
    T = series_or_steps.n_steps if isinstance(series_or_steps, FlowSeries) else int(series_or_steps)
    if H_in < 1 or H_out < 1 or stride < 1:
        raise ContractError("H_in, H_out and stride must be >= 1")
    if T < H_in + H_out:
        raise ContractError(f"series has T={T} steps, need at least H_in + H_out = {H_in + H_out}")
    return np.arange(0, T - H_in - H_out + 1, stride, dtype=np.int64)


def _ratio_count(ratio: float, W: int) -> int:
    return math.ceil(round(ratio * W, 9))


def chronological_split(windows, train_ratio, val_ratio, test_ratio, *, span: int) -> Split:
    """Split ordered window starts into train / val / test.

    ``span`` is ``H_in + H_out``.  Windows of an earlier split whose span
    reaches into the first window of the next split are dropped.
    """
    windows = np.asarray(windows, dtype=np.int64)
    ratios = (train_ratio, val_ratio, test_ratio)
    if any(not 0 < r <= 1 for r in ratios) or sum(ratios) > 1 + 1e-9:
        raise ContractError(f"split ratios must lie in (0, 1] and sum to at most 1, got {ratios}")
    W = len(windows)
    n_train, n_val, n_test = (_ratio_count(r, W) for r in ratios)
    n_val_test = min(W, n_val + n_test)
    test = windows[W - n_test:]
    val = windows[W - n_val_test: W - n_test]
    train = windows[: min(n_train, W - n_val_test)]
    if len(test) and len(val):
        val = val[val + span <= test[0]]
    later = val[0] if len(val) else (test[0] if len(test) else None)
    if later is not None:
        train = train[train + span <= later]
    for name, part in zip(("train", "val", "test"), (train, val, test)):
        if len(part) == 0:
            raise SplitError(f"{name} split is empty after dropping boundary windows")
    return Split(train, val, test)


def extract_windows(series: FlowSeries, starts, H_in: int, H_out: int, split: str = "all") -> WindowBatch:
    starts = np.asarray(starts, dtype=np.int64)
    if len(starts) and (starts.min() < 0 or starts.max() + H_in + H_out > series.n_steps):
        raise ContractError("window starts exceed the series length")
    tod, dow, _, _ = calendar_features(series)
    in_idx = starts[:, None] + np.arange(H_in)
    out_idx = starts[:, None] + H_in + np.arange(H_out)
    values = series.values
    return WindowBatch(
        inputs=np.ascontiguousarray(values[:, in_idx].transpose(1, 0, 2, 3)),
        targets=np.ascontiguousarray(values[:, out_idx].transpose(1, 0, 2, 3)),
        tod_idx=tod[in_idx],
        dow_idx=dow[in_idx],
        window_start=starts.copy(),
        split=split,
    )


# ---------------------------------------------------------------- normalization


class FlowScaler(TransformerMixin, BaseEstimator):
    """Per-channel z-score scaling over the last axis.

    Standard deviations are floored at ``std_floor`` so constant channels do
    not blow up.
    """

    def __init__(self, std_floor=STD_FLOOR):
        self.std_floor = std_floor

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        flat = X.reshape(-1, X.shape[-1])
        if flat.shape[0] == 0:
            raise ContractError("cannot fit a scaler on empty data")
        self.mean_ = flat.mean(axis=0)
        self.std_ = np.maximum(flat.std(axis=0), self.std_floor)
        self.n_features_in_ = X.shape[-1]
        return self

    @property
    def stats_(self) -> NormStats:
        check_is_fitted(self, ["mean_", "std_"])
        return NormStats(self.mean_, self.std_)

    def transform(self, X):
        return self.stats_.apply(X)

    def inverse_transform(self, X):
        return self.stats_.invert(X)


def fit_normalizer(series: FlowSeries, train_windows, H_in: int) -> NormStats:
    """Channel statistics from the input steps of the training windows only."""
    train_windows = np.asarray(train_windows, dtype=np.int64)
    if len(train_windows) == 0:
        raise ContractError("fit_normalizer needs at least one training window")
    covered = np.zeros(series.n_steps, dtype=bool)
    for s in train_windows:
        covered[s: s + H_in] = True
    return FlowScaler().fit(series.values[:, covered]).stats_


# ---------------------------------------------------------------- regions


def grid_adjacency(rows: int, cols: int) -> np.ndarray:
    """0/1 adjacency of an 8-connected ``rows x cols`` grid, row-major ids."""
    n = rows * cols
    adj = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if (dr or dc) and 0 <= rr < rows and 0 <= cc < cols:
                        adj[r * cols + c, rr * cols + cc] = 1.0
    return adj


def make_region_graph(adjacency, K_r: int = 8) -> RegionGraph:
    adj = np.asarray(adjacency, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ContractError(f"adjacency must be square, got shape {adj.shape}")
    if (adj < 0).any():
        raise ContractError("adjacency weights must be non-negative")
    if not np.allclose(adj, adj.T, rtol=0, atol=1e-6):
        raise ContractError("adjacency must be symmetric")
    if np.any(np.diag(adj) != 0):
        raise ContractError("adjacency must have a zero diagonal")
    return RegionGraph(adj, build_neighbor_lists(adj, K_r))


def build_neighbor_lists(adjacency=None, K_r: int = 8, *, grid_shape=None, n_regions=None,
                         mode: str = "adjacency") -> list[list[int]]:
    """Up to ``K_r`` neighbors per region, heaviest edge first, ties by id.

    ``grid_shape`` builds an 8-connected grid instead of reading
    ``adjacency``.  ``mode="literal"`` ignores geometry and lists regions
    ``s+1 .. s+K_r`` that exist.
    """
    if K_r < 0:
        raise ContractError("K_r must be >= 0")
    if mode == "literal":
        if n_regions is None:
            n_regions = len(adjacency) if adjacency is not None else int(np.prod(grid_shape))
        return [[j for j in range(s + 1, s + K_r + 1) if j < n_regions] for s in range(n_regions)]
    if mode != "adjacency":
        raise ContractError(f"unknown neighbor mode {mode!r}")
    if grid_shape is not None:
        adjacency = grid_adjacency(*grid_shape)
    if adjacency is None:
        raise ContractError("build_neighbor_lists needs an adjacency matrix or grid dims")
    adj = np.asarray(adjacency, dtype=np.float64)
    lists = []
    for s in range(adj.shape[0]):
        cand = [j for j in range(adj.shape[0]) if j != s and adj[s, j] > 0]
        cand.sort(key=lambda j: (-adj[s, j], j))
        lists.append(cand[:K_r])
    return lists


def default_grid(n: int) -> tuple[int, int]:
    """Most square ``rows x cols`` factorization of ``n``."""
    rows = int(math.isqrt(n))
    while n % rows:
        rows -= 1
    return rows, n // rows


# ---------------------------------------------------------------- synthesis


def generate_synthetic(cfg: SynthConfig):
    """Diurnal, weekly and spatially mixed flow field.

    Returns ``(series, graph, truth)`` where ``truth`` holds the drawn base
    rates and phases.  Output is a pure function of ``cfg``.
    """
    N, T, C = cfg.n_regions, cfg.n_steps, cfg.n_channels
    rows, cols = (cfg.grid_rows, cfg.grid_cols) if cfg.grid_rows else default_grid(N)
    if rows * cols != N:
        raise ContractError(f"grid {rows}x{cols} does not hold {N} regions")
    start = pd.Timestamp(cfg.start_time)
    if start.tzinfo is None:
        start = start.tz_localize("UTC")
    channels = ("inflow", "outflow")[:C] if C <= 2 else tuple(f"flow{c}" for c in range(C))

    if cfg.base_rates is not None:
        base = np.asarray(cfg.base_rates, dtype=np.float64)
    else:
        base = make_rng(cfg.seed, "synth_base").uniform(cfg.base_low, cfg.base_high, size=N)
    phase = make_rng(cfg.seed, "synth_phase").uniform(0.0, 2 * np.pi, size=(N, C))

    skeleton = FlowSeries(np.zeros((N, T, C)), start, cfg.interval_minutes, channels)
    tod, dow, T1, _ = calendar_features(skeleton)
    weekly = np.where(dow >= 5, cfg.weekend_factor, 1.0)
    angle = 2 * np.pi * tod[None, :, None] / T1 + phase[:, None, :]
    x = base[:, None, None] * (1 + cfg.amplitude * np.sin(angle)) * weekly[None, :, None]
    x = np.maximum(x, 0.0)

    adj = grid_adjacency(rows, cols)
    if cfg.mixing > 0:
        deg = adj.sum(axis=1, keepdims=True)
        # isolated regions (a 1-region grid) mix with themselves only
        mix = np.where(deg > 0, adj / np.maximum(deg, 1), np.eye(N))
        x = (1 - cfg.mixing) * x + cfg.mixing * np.einsum("ij,jtc->itc", mix, x)
    if cfg.noise_std > 0:
        x = x + make_rng(cfg.seed, "synth_noise").normal(0.0, cfg.noise_std, size=x.shape)
    # float32-representable so CSV, teacher files and training all see identical values
    x = np.maximum(x, 0.0).astype(np.float32).astype(np.float64)

    series = FlowSeries(x, start, cfg.interval_minutes, channels, grid_shape=(rows, cols))
    series = replace(series, meta_bytes=format_meta(series).encode())
    graph = RegionGraph(adj, build_neighbor_lists(adj, 8))
    return series, graph, {"base_rates": base, "phases": phase, "grid_shape": (rows, cols)}


def spatial_total_variation(values, neighbor_lists) -> float:
    """Mean absolute difference between each region and its listed neighbors."""
    values = np.asarray(values)
    pairs = [(s, j) for s, nb in enumerate(neighbor_lists) for j in nb]
    if not pairs:
        return 0.0
    s_idx, j_idx = np.array(pairs).T
    return float(np.abs(values[s_idx] - values[j_idx]).mean())
