"""Teacher predictions: binary file protocol, synthetic oracle and prompt export."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .data import FlowSeries, WindowBatch, calendar_features
from .exceptions import ContractError, DimensionError, FormatError
from .rng import make_rng

MAGIC = b"FDTP"
VERSION = 1
_HEADER = struct.Struct("<4sIIIHHQ")


@dataclass(frozen=True, eq=False)
class TeacherPredictions:
    values: np.ndarray  # (W, N, H_out, C) float32, original flow units
    fingerprint: int = 0

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        if v.ndim != 4:
            raise DimensionError(f"teacher values must be (W, N, H_out, C), got {v.shape}")
        if not np.isfinite(v).all():
            raise ContractError("teacher values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def dims(self):
        return tuple(self.values.shape)


@dataclass(frozen=True)
class OracleConfig:
    noise_std: float = 0.0
    bias: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ContractError("oracle noise_std must be >= 0")


def dataset_fingerprint(meta_bytes: bytes, ratios, window_starts) -> int:
    """Stable 64-bit hash tying a teacher file to one dataset split."""
    h = hashlib.blake2b(digest_size=8)
    h.update(bytes(meta_bytes))
    h.update(b"|" + ",".join(f"{float(r):.17g}" for r in ratios).encode() + b"|")
    h.update(np.asarray(window_starts, dtype="<i8").tobytes())
    return int.from_bytes(h.digest(), "little")


def save_predictions(pred: TeacherPredictions, path) -> None:
    W, N, H_out, C = pred.dims
    header = _HEADER.pack(MAGIC, VERSION, W, N, H_out, C, pred.fingerprint)
    Path(path).write_bytes(header + pred.values.astype("<f4").tobytes())


def load_predictions(path, expected_dims=None, fingerprint: int | None = None) -> TeacherPredictions:
    """Read a teacher file, verifying dims and fingerprint when given."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a teacher header")
    magic, version, W, N, H_out, C, fp = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if expected_dims is not None and tuple(expected_dims) != (W, N, H_out, C):
        raise DimensionError(f"{path}: teacher dims {(W, N, H_out, C)} != expected {tuple(expected_dims)}")
    if fingerprint is not None and fp != fingerprint:
        raise FormatError(f"{path}: fingerprint {fp:#018x} does not match dataset split {fingerprint:#018x}")
    n = W * N * H_out * C
    payload = blob[_HEADER.size:]
    if len(payload) != 4 * n:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * n}")
    values = np.frombuffer(payload, dtype="<f4").reshape(W, N, H_out, C).astype(np.float32)
    return TeacherPredictions(values, fp)


def oracle_teacher(targets, cfg: OracleConfig, fingerprint: int = 0) -> TeacherPredictions:
    """Ground truth plus bias and seeded Gaussian noise, clipped at zero."""
    targets = np.asarray(targets, dtype=np.float64)
    noisy = targets + cfg.bias
    if cfg.noise_std > 0:
        noisy = noisy + make_rng(cfg.seed, "oracle").normal(0.0, cfg.noise_std, size=targets.shape)
    return TeacherPredictions(np.maximum(noisy, 0.0), fingerprint)


class OracleTeacher:
    """Callable teacher provider backed by :func:`oracle_teacher`."""

    def __init__(self, cfg: OracleConfig):
        self.cfg = cfg

    def __call__(self, batch: WindowBatch) -> np.ndarray:
        return oracle_teacher(batch.targets, self.cfg).values


class FileTeacher:
    """Callable teacher provider reading a file aligned to the training windows."""

    def __init__(self, path, fingerprint: int | None):
        self.path = Path(path)
        self.fingerprint = fingerprint

    def __call__(self, batch: WindowBatch) -> np.ndarray:
        B, N, _, H_out, C = batch.shape
        return load_predictions(self.path, (B, N, H_out, C), self.fingerprint).values


# ---------------------------------------------------------------- prompts


def _stamp(ts: pd.Timestamp) -> str:
    return f"{ts:%B} {ts.day}, {ts.year}, {ts:%H:%M}, {ts:%A}"


def _flow_list(values) -> str:
    return "[" + " ".join(str(int(round(v))) for v in values) + "]"


NO_POI = "No POI information is available for this region."


def render_prompt(series: FlowSeries, start: int, region: int, H_in: int, H_out: int,
                  region_info: str | None = None, city: str = "the city") -> str:
    vals = series.values[region]
    interval = series.interval_minutes
    t_hist = (series.timestamp(start), series.timestamp(start + H_in - 1))
    t_pred = (series.timestamp(start + H_in), series.timestamp(start + H_in + H_out - 1))
    cadence = f"with data points recorded at {interval}-minute intervals"
    inflow = _flow_list(vals[start: start + H_in, 0])
    outflow = _flow_list(vals[start: start + H_in, 1])
    instruction = (
        f"Given the historical data for taxi flow over {H_in} time steps in a specific region of {city}, "
        f"the recorded taxi inflows are {inflow}, and the recorded taxi outflows are {outflow}. "
        f"The recording time of the historical data is '{_stamp(t_hist[0])} to {_stamp(t_hist[1])}, {cadence}'. "
        f"Here is the region information: {region_info or NO_POI} "
        f"Now we want to predict the taxi inflow and outflow for the next {H_out} time steps during the time "
        f"period of '{_stamp(t_pred[0])} to {_stamp(t_pred[1])}, {cadence}'."
    )
    extra = (
        "To improve prediction accuracy, a spatio-temporal model is utilized to encode the historical taxi "
        "data as tokens <ST_HIS>, where the first and the second tokens correspond to the representations of "
        "taxi inflow and outflow. Please conduct an analysis of the traffic patterns in this region, taking "
        "into account the provided time and regional information, and then generate the predictive tokens "
        'for regression, in the form "<ST_PRE>".'
    )
    return f"Instructions: {instruction}\nAdditional Information: {extra}\n"


def export_instruction_prompts(series: FlowSeries, windows, out_dir, H_in: int = 12, H_out: int = 12,
                               region_info: dict[int, str] | None = None, city: str = "the city") -> list[Path]:
    """Write one ``prompt_<window_start>.txt`` per window holding a prompt for every region."""
    if series.n_channels != 2:
        raise ContractError(f"prompt export needs inflow and outflow channels, series has {series.n_channels}")
    calendar_features(series)  # validates the interval
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    region_info = region_info or {}
    paths = []
    for start in np.asarray(windows, dtype=np.int64):
        if start < 0 or start + H_in + H_out > series.n_steps:
            raise ContractError(f"window {start} exceeds the series")
        blocks = [
            f"### region {s}\n" + render_prompt(series, int(start), s, H_in, H_out, region_info.get(s), city)
            for s in range(series.n_regions)
        ]
        path = out_dir / f"prompt_{int(start)}.txt"
        path.write_text("\n".join(blocks), encoding="utf-8")
        paths.append(path)
    return paths


def read_region_info(path) -> dict[int, str]:
    frame = pd.read_csv(path)
    if list(frame.columns) != ["region_id", "description"]:
        raise FormatError("region info CSV needs header region_id,description")
    return {int(r): str(d) for r, d in zip(frame["region_id"], frame["description"])}
