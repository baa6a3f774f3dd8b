"""Optimization loop, Adam, learning-rate schedule and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import NormStats, WindowBatch
from .exceptions import ContractError, DimensionError, FormatError, NumericalError
from .losses import LossBreakdown, LossWeights, total_loss
from .metrics import compute_metrics
from .model import (
    ModelConfig,
    as_leaves,
    check_params,
    forward,
    init_params,
    param_shapes,
    predict,
)
from .rng import from_state, get_state, make_rng

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"FDCK"
CKPT_VERSION = 1
LOG_COLUMNS = ("epoch", "lr", "reg", "tbl", "kl", "spa", "tem", "total", "gate_open_frac", "val_mae", "val_rmse")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.0055
    decay: float = 0.6
    decay_every: int = 5
    batch_size: int = 80
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    clip_norm: float = 5.0
    stochastic_latent: bool = True
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ContractError("lr0 must be > 0")
        if not 0 < self.decay <= 1:
            raise ContractError("decay must lie in (0, 1]")
        if self.batch_size < 1 or self.decay_every < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ContractError("batch_size, decay_every and max_epochs must be >= 1, patience >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int = 0
    best_val_mae: float = float("inf")
    bad_epochs: int = 0
    rng_states: dict = field(default_factory=dict)
    norm: NormStats | None = None
    train_cfg: dict = field(default_factory=dict)
    version: int = CKPT_VERSION


@dataclass
class EpochLog:
    epoch: int
    lr: float
    losses: LossBreakdown
    val_mae: float
    val_rmse: float

    def as_row(self):
        return [self.epoch, self.lr, *self.losses.as_row(), self.val_mae, self.val_rmse]


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: list[EpochLog]

    def __iter__(self):
        return iter((self.best, self.log))


# ---------------------------------------------------------------- optimizer


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        grads = {k: (g * s).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


def optimizer_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    for name, g in grads.items():
        if name not in params or np.shape(g) != np.shape(params[name]):
            raise DimensionError(f"gradient for {name} does not match its parameter")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name}")
    t = state.t + 1
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_p[name], new_m[name], new_v[name] = p, state.m[name], state.v[name]
            continue
        m = beta1 * state.m[name] + (1 - beta1) * g
        v = beta2 * state.v[name] + (1 - beta2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[name] = (p - step).astype(p.dtype)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------- training loop


def _epoch_pass(train_set, teacher, params, adam, cfg, model_cfg, norm, neighbor_lists, lr, shuffle_rng, noise_rng):
    order = shuffle_rng.permutation(len(train_set))
    sums = np.zeros(7)
    seen = 0
    for lo in range(0, len(order), cfg.batch_size):
        idx = order[lo: lo + cfg.batch_size]
        batch = train_set.subset(idx)
        leaves = as_leaves(params)
        if cfg.stochastic_latent:
            pred, stats = forward(batch, leaves, model_cfg, norm=norm, rng=noise_rng, phase="train")
        else:
            pred, stats = forward(batch, leaves, model_cfg, norm=norm, phase="train",
                                  eps=np.zeros((len(idx), model_cfg.n_regions, model_cfg.H_in, model_cfg.K),
                                               dtype=leaves["W_p"].dtype))
        t_batch = None if teacher is None else teacher[idx]
        loss, parts = total_loss(pred, t_batch, batch.targets, stats, cfg.weights, neighbor_lists, norm=norm)
        grads = ag.backward(loss, leaves)
        grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
        params, adam = optimizer_step(params, grads, adam, lr)
        sums += np.array(parts.as_row()) * len(idx)
        seen += len(idx)
    means = sums / seen
    return params, adam, LossBreakdown(*means[:6], tbl_gate_open_fraction=means[6])


def train(train_set: WindowBatch, val_set: WindowBatch, model_cfg: ModelConfig, cfg: TrainConfig, *,
          norm: NormStats | None, neighbor_lists=None, teacher=None, resume: Checkpoint | None = None,
          checkpoint_dir=None) -> TrainResult:
    """Fit the student; returns the best (lowest validation MAE) and last checkpoints plus the epoch log.

    ``teacher`` is an array aligned with ``train_set`` in original flow units.
    """
    if train_set.split != "train":
        raise ContractError(f"refusing to train on windows tagged {train_set.split!r}")
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractError("training and validation sets must be non-empty")
    if cfg.weights.needs_teacher:
        if teacher is None:
            raise ContractError("teacher required: the teacher-bounded term is active")
        teacher = np.asarray(teacher)
        if teacher.shape != train_set.targets.shape:
            raise DimensionError(f"teacher shape {teacher.shape} != target shape {train_set.targets.shape}")
    else:
        teacher = None

    if resume is None:
        params = init_params(model_cfg, cfg.seed)
        adam = AdamState.zeros_like(params)
        shuffle_rng, noise_rng = make_rng(cfg.seed, "shuffle"), make_rng(cfg.seed, "latent_noise")
        start_epoch, best_mae, bad = 0, float("inf"), 0
        best = None
    else:
        if resume.model_cfg != model_cfg:
            raise ContractError("checkpoint model config differs from the requested one")
        check_params(resume.params, model_cfg)
        params = {k: v.copy() for k, v in resume.params.items()}
        adam = AdamState({k: v.copy() for k, v in resume.adam.m.items()},
                         {k: v.copy() for k, v in resume.adam.v.items()}, resume.adam.t)
        shuffle_rng = from_state(resume.rng_states["shuffle"])
        noise_rng = from_state(resume.rng_states["latent_noise"])
        start_epoch, best_mae, bad = resume.epoch, resume.best_val_mae, resume.bad_epochs
        best = None

    def snapshot(epoch):
        return Checkpoint(
            model_cfg=model_cfg,
            params={k: v.copy() for k, v in params.items()},
            adam=AdamState({k: v.copy() for k, v in adam.m.items()},
                           {k: v.copy() for k, v in adam.v.items()}, adam.t),
            epoch=epoch,
            best_val_mae=best_mae,
            bad_epochs=bad,
            rng_states={"shuffle": get_state(shuffle_rng), "latent_noise": get_state(noise_rng)},
            norm=norm,
            train_cfg=cfg.to_dict(),
        )

    last_good = snapshot(start_epoch)
    log: list[EpochLog] = []
    for epoch in range(start_epoch, cfg.max_epochs):
        lr = lr_schedule(epoch, cfg)
        try:
            params, adam, parts = _epoch_pass(
                train_set, teacher, params, adam, cfg, model_cfg, norm, neighbor_lists, lr, shuffle_rng, noise_rng
            )
            if not np.isfinite(parts.total):
                raise NumericalError("training loss is not finite")
        except NumericalError as exc:
            if checkpoint_dir is not None:
                save_checkpoint(last_good, Path(checkpoint_dir) / "last_good.fdck")
            raise NumericalError(f"training diverged in epoch {epoch}: {exc}") from None
        val_pred = predict(val_set, params, model_cfg, norm)
        val_mae, val_rmse = compute_metrics(val_pred, val_set.targets)
        if val_mae < best_mae:
            best_mae, bad = val_mae, 0
            improved = True
        else:
            bad += 1
            improved = False
        entry = EpochLog(epoch, lr, parts, val_mae, val_rmse)
        log.append(entry)
        logger.info("epoch %d lr %.5g loss %.4f val_mae %.4f", epoch, lr, parts.total, val_mae)
        last_good = snapshot(epoch + 1)
        if improved:
            best = last_good
        if bad >= cfg.patience:
            break
    if best is None:
        # resumed run that never improved on the stored best
        best = last_good
    return TrainResult(best=best, last=last_good, log=log)


def format_log(log: list[EpochLog]) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for entry in log:
        lines.append(",".join(repr(float(v)) if i else str(int(v)) for i, v in enumerate(entry.as_row())))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- checkpoint files


def _write_tensor(buf: list, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    buf.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    config = {
        "model": ckpt.model_cfg.to_dict(),
        "epoch": ckpt.epoch,
        "best_val_mae": ckpt.best_val_mae,
        "bad_epochs": ckpt.bad_epochs,
        "adam_t": ckpt.adam.t,
        "rng_states": ckpt.rng_states,
        "norm": None if ckpt.norm is None else {"mean": list(map(float, ckpt.norm.mean)),
                                                "std": list(map(float, ckpt.norm.std))},
        "train": ckpt.train_cfg,
    }
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf = [CKPT_MAGIC, struct.pack("<II", ckpt.version, len(blob)), blob]
    for name in param_shapes(ckpt.model_cfg):
        _write_tensor(buf, f"param/{name}", ckpt.params[name])
    for name in param_shapes(ckpt.model_cfg):
        _write_tensor(buf, f"adam.m/{name}", ckpt.adam.m[name])
        _write_tensor(buf, f"adam.v/{name}", ckpt.adam.v[name])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(buf))


def load_checkpoint(path, expected_cfg: ModelConfig | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = json.loads(blob[12: 12 + n].decode("utf-8"))
        model_cfg = ModelConfig(**config["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt config block ({exc})") from None
    if expected_cfg is not None and expected_cfg != model_cfg:
        raise DimensionError(f"{path}: checkpoint model config {model_cfg} != expected {expected_cfg}")
    pos = 12 + n
    tensors = {}
    try:
        while pos < len(blob):
            (ln,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2: pos + 2 + ln].decode("utf-8")
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<B", blob, pos)
            dims = struct.unpack_from(f"<{ndim}I", blob, pos + 1)
            pos += 1 + 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            if pos + 4 * count > len(blob):
                raise FormatError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error:
        raise FormatError(f"{path}: truncated tensor table") from None
    shapes = param_shapes(model_cfg)
    params, m, v = {}, {}, {}
    for name, shape in shapes.items():
        for prefix, target in (("param/", params), ("adam.m/", m), ("adam.v/", v)):
            arr = tensors.get(prefix + name)
            if arr is None:
                raise FormatError(f"{path}: missing tensor {prefix + name}")
            if arr.shape != shape:
                raise DimensionError(f"{path}: tensor {prefix + name} has shape {arr.shape}, expected {shape}")
            target[name] = arr
    norm = config.get("norm")
    return Checkpoint(
        model_cfg=model_cfg,
        params=params,
        adam=AdamState(m, v, config["adam_t"]),
        epoch=config["epoch"],
        best_val_mae=config["best_val_mae"],
        bad_epochs=config["bad_epochs"],
        rng_states=config["rng_states"],
        norm=None if norm is None else NormStats(np.array(norm["mean"]), np.array(norm["std"])),
        train_cfg=config["train"],
        version=version,
    )


def with_weights(cfg: TrainConfig, weights: LossWeights, **changes) -> TrainConfig:
    return replace(cfg, weights=weights, **changes)
