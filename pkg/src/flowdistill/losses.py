"""Training objective: regression, teacher-bounded, KL and correlation terms."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .exceptions import ContractError, DimensionError
from .model import LatentStats

GRANULARITIES = ("element", "sample", "batch")
TBL_VARIANTS = ("paper-literal", "to-teacher")
ABLATIONS = ("full", "w/o-TB", "w/o-IB", "w/o-SC", "w/o-TC")


@dataclass(frozen=True)
class LossWeights:
    lambda_tbl: float = 0.10
    delta: float = 10.0
    lambda_kl: float = 1e-3
    lambda_spa: float = 0.6
    lambda_tem: float = 0.35
    H: int = 12
    K_r: int = 8
    granularity: str = "element"
    tbl_variant: str = "paper-literal"
    use_tbl: bool = True
    use_kl: bool = True
    use_spa: bool = True
    use_tem: bool = True

    def __post_init__(self):
        lambdas = (self.lambda_tbl, self.lambda_kl, self.lambda_spa, self.lambda_tem)
        if min(lambdas) < 0 or self.delta < 0:
            raise ContractError("loss weights and delta must be non-negative")
        if self.H < 0 or self.H % 2:
            raise ContractError(f"temporal window H must be even and >= 0, got {self.H}")
        if self.K_r < 0:
            raise ContractError("K_r must be >= 0")
        if self.granularity not in GRANULARITIES:
            raise ContractError(f"granularity must be one of {GRANULARITIES}")
        if self.tbl_variant not in TBL_VARIANTS:
            raise ContractError(f"tbl_variant must be one of {TBL_VARIANTS}")

    @property
    def effective(self) -> dict[str, float]:
        return {
            "tbl": self.lambda_tbl if self.use_tbl else 0.0,
            "kl": self.lambda_kl if self.use_kl else 0.0,
            "spa": self.lambda_spa if self.use_spa else 0.0,
            "tem": self.lambda_tem if self.use_tem else 0.0,
        }

    @property
    def needs_teacher(self) -> bool:
        return self.effective["tbl"] > 0

    def ablate(self, name: str) -> LossWeights:
        """Weights for one row of the ablation table."""
        if name == "full":
            return self
        if name == "w/o-TB":
            return replace(self, use_tbl=False)
        if name == "w/o-IB":
            return replace(self, use_kl=False)
        if name == "w/o-SC":
            return replace(self, use_spa=False)
        if name == "w/o-TC":
            return replace(self, use_tem=False)
        raise ContractError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")


@dataclass(frozen=True)
class LossBreakdown:
    reg: float
    tbl: float
    kl: float
    spa: float
    tem: float
    total: float
    tbl_gate_open_fraction: float

    def as_row(self):
        return [self.reg, self.tbl, self.kl, self.spa, self.tem, self.total, self.tbl_gate_open_fraction]


def _check_same(a: Tensor, b, what: str):
    if tuple(a.shape) != tuple(np.shape(b)):
        raise DimensionError(f"{what}: shapes {a.shape} and {np.shape(b)} differ")


def _const(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=like.dtype)


def regression_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error."""
    _check_same(pred, target.data if isinstance(target, Tensor) else target, "regression_loss")
    return ag.mean(ag.abs(pred - _const(target, pred)))


def _unit_mae(err: np.ndarray, granularity: str) -> np.ndarray:
    """Per-gating-unit MAE, broadcastable back to ``err``."""
    if granularity == "element":
        return err
    if granularity == "sample":
        return err.mean(axis=tuple(range(1, err.ndim)), keepdims=True)
    return np.asarray(err.mean()).reshape((1,) * err.ndim)


def teacher_gate(pred, teacher, target, delta: float, granularity: str = "element") -> np.ndarray:
    """0/1 mask of gating units where teacher MAE - student MAE < delta."""
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    teacher, target = np.asarray(teacher), np.asarray(target)
    t_err = _unit_mae(np.abs(teacher - target), granularity)
    s_err = _unit_mae(np.abs(pred - target), granularity)
    return (t_err - s_err < delta).astype(pred.dtype)


def teacher_bounded_loss(pred: Tensor, teacher, target, delta: float, granularity: str = "element",
                         variant: str = "paper-literal", gate=None) -> tuple[Tensor, float]:
    """Gated regression loss. Returns ``(loss, gate-open fraction)``.

    The gate is a constant: no gradient flows through the comparison.  A
    precomputed ``gate`` (broadcastable to ``pred``) replaces the comparison,
    which keeps the loss smooth under finite-difference probing.
    """
    if delta < 0:
        raise ContractError("delta must be >= 0")
    if granularity not in GRANULARITIES:
        raise ContractError(f"granularity must be one of {GRANULARITIES}")
    teacher, target = np.asarray(teacher), np.asarray(target)
    _check_same(pred, teacher, "teacher_bounded_loss")
    _check_same(pred, target, "teacher_bounded_loss")
    if gate is None:
        gate = teacher_gate(pred, teacher, target, delta, granularity)
    gate = np.asarray(gate, dtype=pred.dtype)
    if variant == "paper-literal":
        ref = target
    elif variant == "to-teacher":
        ref = teacher
    else:
        raise ContractError(f"variant must be one of {TBL_VARIANTS}")
    err = ag.abs(pred - _const(ref, pred))
    loss = ag.mean(err * Tensor(np.broadcast_to(gate, pred.shape), dtype=pred.dtype))
    return loss, float(gate.mean())


def kl_divergence(stats: LatentStats) -> Tensor:
    """Closed-form KL to a standard normal, summed over coordinates, averaged over the batch."""
    if (stats.sigma2.data <= 0).any():
        raise ContractError("kl_divergence needs strictly positive variances")
    mu, s2 = stats.mu, stats.sigma2
    B = mu.shape[0] if len(mu.shape) > 1 else 1
    terms = ag.scale(ag.log(s2), -1.0) + s2 + ag.square(mu) - 1.0
    return ag.scale(ag.sum(terms), 0.5 / B)


def spatial_correlation_loss(pred: Tensor, neighbor_lists) -> Tensor:
    """Mean over (b, s, t, c) of the summed |pred_s - pred_neighbor| over each neighbor list."""
    N = pred.shape[1]
    if len(neighbor_lists) != N:
        raise ContractError(f"{len(neighbor_lists)} neighbor lists for {N} regions")
    pairs = [(s, j) for s, nb in enumerate(neighbor_lists) for j in nb]
    if not pairs:
        return Tensor(np.zeros(()), dtype=pred.dtype)
    src, dst = np.array(pairs, dtype=np.int64).T
    if dst.min() < 0 or dst.max() >= N or (src == dst).any():
        raise ContractError("neighbor lists reference invalid regions")
    diff = ag.take(pred, src, axis=1) - ag.take(pred, dst, axis=1)
    return ag.scale(ag.sum(ag.abs(diff)), 1.0 / pred.size)


def temporal_offset_weights(H_out: int, H: int) -> list[tuple[int, np.ndarray]]:
    """For each positive offset l, the weight of |y_{t+l} - y_t| for t = 0..H_out-l-1.

    Each step's neighbor sum is divided by its number of in-range offsets,
    so a pair (t, t+l) carries 1/count(t) + 1/count(t+l).
    """
    half = H // 2
    steps = np.arange(H_out)
    counts = np.array(
        [sum(1 for l in range(-half, half + 1) if l and 0 <= t + l < H_out) for t in steps]
    )
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    out = []
    for l in range(1, min(half, H_out - 1) + 1):
        out.append((l, inv[: H_out - l] + inv[l:]))
    return out


def temporal_correlation_loss(pred: Tensor, H: int) -> Tensor:
    """Mean over (b, s, t, c) of the count-normalized |pred_t - pred_{t+l}| sum, 0 < |l| <= H/2."""
    if H < 0 or H % 2:
        raise ContractError(f"H must be even and >= 0, got {H}")
    H_out = pred.shape[2]
    total = None
    for l, w in temporal_offset_weights(H_out, H):
        diff = ag.abs(pred[:, :, l:, :] - pred[:, :, : H_out - l, :])
        term = ag.sum(diff * Tensor(w.reshape(1, 1, -1, 1), dtype=pred.dtype))
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()), dtype=pred.dtype)
    return ag.scale(total, 1.0 / pred.size)


def total_loss(pred: Tensor, teacher, target, stats: LatentStats, weights: LossWeights,
               neighbor_lists=None, norm=None, gate=None) -> tuple[Tensor, LossBreakdown]:
    """Weighted objective and its per-term breakdown.

    ``teacher`` and ``target`` are in original flow units.  Without ``norm``,
    ``pred`` is too.  With ``norm``, ``pred`` is the network's normalized
    output: the regression and teacher-bounded terms see the denormalized
    prediction while the spatial and temporal terms act on ``pred`` as given.
    Terms with zero effective weight are not evaluated and report 0.
    ``gate`` optionally freezes the teacher-bounded gate.
    """
    lam = weights.effective
    zero = Tensor(np.zeros(()), dtype=pred.dtype)
    smooth_pred = pred
    if norm is not None:
        pred = pred * Tensor(np.asarray(norm.std), dtype=pred.dtype) + Tensor(np.asarray(norm.mean), dtype=pred.dtype)
    reg = regression_loss(pred, target)
    tbl, gate_frac = zero, 0.0
    if lam["tbl"] > 0:
        if teacher is None:
            raise ContractError("teacher predictions required when the teacher-bounded term is active")
        tbl, gate_frac = teacher_bounded_loss(
            pred, teacher, target, weights.delta, weights.granularity, weights.tbl_variant, gate
        )
    kl = kl_divergence(stats) if lam["kl"] > 0 else zero
    spa = zero
    if lam["spa"] > 0:
        if neighbor_lists is None:
            raise ContractError("neighbor lists required for the spatial term")
        spa = spatial_correlation_loss(smooth_pred, neighbor_lists)
    tem = temporal_correlation_loss(smooth_pred, weights.H) if lam["tem"] > 0 else zero

    total = reg
    for name, term in (("tbl", tbl), ("kl", kl), ("spa", spa), ("tem", tem)):
        if lam[name] > 0:
            total = total + ag.scale(term, lam[name])
    breakdown = LossBreakdown(
        reg=reg.item(),
        tbl=tbl.item(),
        kl=kl.item(),
        spa=spa.item(),
        tem=tem.item(),
        total=total.item(),
        tbl_gate_open_fraction=gate_frac,
    )
    return total, breakdown
