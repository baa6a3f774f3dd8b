"""The VIB-MLP student network built on :mod:`flowdistill.autograd`."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import NormStats, WindowBatch
from .exceptions import BoundsError, ContractError, DimensionError, NumericalError
from .rng import make_rng

NOISE_MODES = ("std", "paper-variance")
EVAL_MODES = ("mean", "sample")


@dataclass(frozen=True)
class ModelConfig:
    n_regions: int
    n_channels: int = 1
    T1: int = 48
    T2: int = 7
    d: int = 64
    L: int = 3
    K: int = 64
    H_in: int = 12
    H_out: int = 12
    latent_noise_mode: str = "std"
    eval_mode: str = "mean"
    activation: str = "relu"

    def __post_init__(self):
        dims = (self.n_regions, self.n_channels, self.T1, self.T2, self.d, self.L, self.K, self.H_in, self.H_out)
        if min(dims) < 1:
            raise ContractError(f"model dimensions must be >= 1: {self}")
        if self.latent_noise_mode not in NOISE_MODES:
            raise ContractError(f"latent_noise_mode must be one of {NOISE_MODES}")
        if self.eval_mode not in EVAL_MODES:
            raise ContractError(f"eval_mode must be one of {EVAL_MODES}")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"activation must be one of {sorted(_ACTIVATIONS)}")

    def to_dict(self):
        return asdict(self)


_ACTIVATIONS = {"relu": ag.relu, "softplus": ag.softplus}


@dataclass(frozen=True)
class LatentStats:
    mu: Tensor  # (B, N, H_in, K)
    sigma2: Tensor  # (B, N, H_in, K), strictly positive


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every learnable tensor."""
    w = 4 * cfg.d
    shapes = {
        "E_s": (cfg.n_regions, cfg.d),
        "E_tod": (cfg.T1, cfg.d),
        "E_dow": (cfg.T2, cfg.d),
        "W_p": (cfg.n_channels, cfg.d),
        "b_p": (cfg.d,),
    }
    for i in range(1, cfg.L):
        shapes[f"W_{i}"] = (w, w)
        shapes[f"b_{i}"] = (w,)
    shapes["W_h"] = (w, 2 * cfg.K)
    shapes["b_h"] = (2 * cfg.K,)
    shapes["W_o"] = (cfg.H_in * cfg.K, cfg.H_out * cfg.n_channels)
    shapes["b_o"] = (cfg.H_out * cfg.n_channels,)
    return shapes


def n_params(cfg: ModelConfig) -> int:
    d, K, C = cfg.d, cfg.K, cfg.n_channels
    w = 4 * d
    return (
        (cfg.n_regions + cfg.T1 + cfg.T2) * d
        + (C + 1) * d
        + (cfg.L - 1) * (w * w + w)
        + (w + 1) * 2 * K
        + (cfg.H_in * K + 1) * cfg.H_out * C
    )


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Embeddings ~ U(-0.1, 0.1), weights ~ U(+-1/sqrt(fan_in)), biases zero."""
    rng = make_rng(seed, "init")
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("E_"):
            arr = rng.uniform(-0.1, 0.1, size=shape)
        elif name.startswith("W_"):
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def check_params(params: Mapping[str, np.ndarray], cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        raise DimensionError(f"parameter names {sorted(params)} do not match config {sorted(expected)}")
    for name, shape in expected.items():
        if tuple(np.shape(params[name])) != shape:
            raise DimensionError(f"parameter {name} has shape {np.shape(params[name])}, expected {shape}")


def as_leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def _leaf(p, name) -> Tensor:
    t = p[name]
    return t if isinstance(t, Tensor) else Tensor(t, name=name)


def assemble_embeddings(batch: WindowBatch, params, cfg: ModelConfig, norm: NormStats | None = None) -> Tensor:
    """Concatenate flow projection and identity embeddings: ``(B, N, H_in, 4d)``."""
    W_p = _leaf(params, "W_p")
    dtype = W_p.dtype
    B, N, H_in, C = batch.inputs.shape
    if N != cfg.n_regions or H_in != cfg.H_in or C != cfg.n_channels:
        raise DimensionError(
            f"batch inputs {batch.inputs.shape} do not match config (N={cfg.n_regions}, "
            f"H_in={cfg.H_in}, C={cfg.n_channels})"
        )
    for name, idx, size in (("tod", batch.tod_idx, cfg.T1), ("dow", batch.dow_idx, cfg.T2)):
        idx = np.asarray(idx)
        bad = (idx < 0) | (idx >= size)
        if bad.any():
            raise BoundsError(f"{name} index {int(idx[bad][0])} out of range [0, {size})")
    x = batch.inputs if norm is None else norm.apply(batch.inputs)
    x = Tensor(np.asarray(x).reshape(-1, C), dtype=dtype)
    flow = ag.matmul(x, W_p) + _leaf(params, "b_p")
    d = cfg.d
    region_idx = np.broadcast_to(np.arange(N)[None, :, None], (B, N, H_in)).reshape(-1)
    tod_idx = np.broadcast_to(np.asarray(batch.tod_idx)[:, None, :], (B, N, H_in)).reshape(-1)
    dow_idx = np.broadcast_to(np.asarray(batch.dow_idx)[:, None, :], (B, N, H_in)).reshape(-1)
    E = ag.concat(
        [
            flow,
            ag.gather_rows(_leaf(params, "E_s"), region_idx),
            ag.gather_rows(_leaf(params, "E_tod"), tod_idx),
            ag.gather_rows(_leaf(params, "E_dow"), dow_idx),
        ],
        axis=-1,
    )
    return E.reshape(B, N, H_in, 4 * d)


def encode_latent(E: Tensor, params, cfg: ModelConfig) -> LatentStats:
    lead = E.shape[:-1]
    h = E.reshape(-1, E.shape[-1])
    act = _ACTIVATIONS[cfg.activation]
    for i in range(1, cfg.L):
        try:
            h = act(ag.matmul(h, _leaf(params, f"W_{i}")) + _leaf(params, f"b_{i}"))
        except NumericalError as exc:
            raise NumericalError(f"encoder layer {i}: {exc}") from None
    try:
        out = ag.matmul(h, _leaf(params, "W_h")) + _leaf(params, "b_h")
    except NumericalError as exc:
        raise NumericalError(f"encoder layer {cfg.L} (head): {exc}") from None
    K = cfg.K
    mu = out[:, :K].reshape(*lead, K)
    sigma2 = ag.softplus(out[:, K:]).reshape(*lead, K)
    return LatentStats(mu, sigma2)


def sample_latent(stats: LatentStats, eps, mode: str = "std") -> Tensor:
    """Reparameterized draw ``mu + scale * eps``.

    ``std`` scales by the standard deviation; ``paper-variance`` scales by the
    variance itself.
    """
    eps = np.asarray(eps)
    if eps.shape != stats.mu.shape:
        raise DimensionError(f"noise shape {eps.shape} != latent shape {stats.mu.shape}")
    if not eps.any():
        return stats.mu
    noise = Tensor(eps, dtype=stats.mu.dtype)
    if mode == "std":
        return stats.mu + ag.sqrt(stats.sigma2) * noise
    if mode == "paper-variance":
        return stats.mu + stats.sigma2 * noise
    raise ContractError(f"unknown latent noise mode {mode!r}")


def decode_prediction(Z: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Affine map of each region's flattened ``H_in x K`` latent to ``H_out x C``."""
    if len(Z.shape) != 4 or Z.shape[2:] != (cfg.H_in, cfg.K):
        raise DimensionError(f"latent shape {Z.shape} does not match (B, N, {cfg.H_in}, {cfg.K})")
    B, N = Z.shape[:2]
    flat = Z.reshape(B * N, cfg.H_in * cfg.K)
    out = ag.matmul(flat, _leaf(params, "W_o")) + _leaf(params, "b_o")
    return out.reshape(B, N, cfg.H_out, cfg.n_channels)


def latent_noise(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    return rng.standard_normal(size=shape).astype(dtype)


def forward(batch: WindowBatch, params, cfg: ModelConfig, *, norm: NormStats | None = None,
            rng: np.random.Generator | None = None, eps=None, phase: str = "eval"):
    """Full student pass. Returns ``(prediction in normalized units, LatentStats)``.

    Noise comes from ``eps`` when given, otherwise from ``rng`` in the train
    phase (or eval phase with ``eval_mode="sample"``); eval with
    ``eval_mode="mean"`` uses the latent mean.
    """
    E = assemble_embeddings(batch, params, cfg, norm)
    stats = encode_latent(E, params, cfg)
    if eps is None:
        stochastic = phase == "train" or (phase == "eval" and cfg.eval_mode == "sample")
        if stochastic:
            if rng is None:
                raise ContractError("a random generator is needed for stochastic forward passes")
            eps = latent_noise(rng, stats.mu.shape, stats.mu.dtype)
        else:
            eps = np.zeros(stats.mu.shape, dtype=stats.mu.dtype)
    Z = sample_latent(stats, eps, cfg.latent_noise_mode)
    return decode_prediction(Z, params, cfg), stats


def denormalize(pred: Tensor, norm: NormStats | None) -> Tensor:
    """Map a normalized prediction tensor back to flow units (differentiable)."""
    if norm is None:
        return pred
    std = np.asarray(norm.std, dtype=pred.dtype)
    mean = np.asarray(norm.mean, dtype=pred.dtype)
    return pred * Tensor(std, dtype=pred.dtype) + Tensor(mean, dtype=pred.dtype)


def predict(batch: WindowBatch, params, cfg: ModelConfig, norm: NormStats | None = None,
            batch_size: int = 256, rng=None) -> np.ndarray:
    """Eval-phase predictions in flow units, computed in chunks."""
    leaves = as_leaves(params, requires_grad=False)
    outs = []
    for lo in range(0, len(batch), batch_size):
        part = batch.subset(np.arange(lo, min(lo + batch_size, len(batch))))
        pred, _ = forward(part, leaves, cfg, norm=norm, rng=rng, phase="eval")
        outs.append(denormalize(pred, norm).data)
    if not outs:
        return np.zeros((0, cfg.n_regions, cfg.H_out, cfg.n_channels), dtype=np.float32)
    return np.concatenate(outs, axis=0)
