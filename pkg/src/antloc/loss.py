"""Training objectives for heatmap matching and DSNT.

Each loss has a plain numpy version working on Heatmap3D / Landmark objects
and a batched graph version (``*_t``) built from :mod:`antloc.netgrad` ops
for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .heatmap import NORM_TOL, Heatmap3D
from .netgrad import tensor as T
from .volume import Landmark

VARIANTS = ("hm_wmse", "dsnt")


class AllZeroTargetError(ValueError):
    """The target map has no positive voxel."""


class AllPositiveTargetError(ValueError):
    """The target map has no zero voxel."""


@dataclass(frozen=True)
class WmseWeights:
    w_p: float
    w_z: float
    n_p: int
    n_z: int


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    variant: str = "dsnt"

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


def _data(h) -> np.ndarray:
    return np.asarray(h.data if hasattr(h, "data") else h)


def wmse_weights(target) -> WmseWeights:
    """Class-balance weights from one target map (positive means value > 0)."""
    t = _data(target)
    n_p = int(np.count_nonzero(t > 0))
    n_z = int(t.size - n_p)
    if n_p == 0:
        raise AllZeroTargetError("target map has no positive voxels")
    if n_z == 0:
        raise AllPositiveTargetError("target map has no zero voxels")
    total = n_p + n_z
    return WmseWeights(w_p=n_z / total, w_z=n_p / total, n_p=n_p, n_z=n_z)


def wmse_loss(pred, target, w: WmseWeights | None = None) -> float:
    p, t = np.asarray(_data(pred), dtype=np.float64), np.asarray(_data(target), dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    w = w or wmse_weights(t)
    m = np.where(t > 0, w.w_p, w.w_z)
    return float(np.mean(m * (p - t) ** 2))


def coord_mse(pred: Landmark, target: Landmark) -> float:
    if pred.frame != "normalized" or target.frame != "normalized":
        raise ValueError(f"coord_mse expects normalized landmarks, got {pred.frame!r} and {target.frame!r}")
    return float(np.mean((pred.array() - target.array()) ** 2))


def _xlogy(x, y):
    return np.where(x > 0, x * np.log(np.where(x > 0, y, 1.0)), 0.0)


def _check_distribution(h, name):
    if not isinstance(h, Heatmap3D) or not h.normalized:
        raise ValueError(f"{name} must be a normalized Heatmap3D")


def js_divergence(P: Heatmap3D, Q: Heatmap3D) -> float:
    """Jensen-Shannon divergence (natural log), in [0, ln 2]."""
    _check_distribution(P, "P")
    _check_distribution(Q, "Q")
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {Q.shape}")
    p = np.asarray(P.data, dtype=np.float64)
    q = np.asarray(Q.data, dtype=np.float64)
    m = 0.5 * (p + q)
    return float(0.5 * np.sum(_xlogy(p, p / np.where(m > 0, m, 1.0))) + 0.5 * np.sum(_xlogy(q, q / np.where(m > 0, m, 1.0))))


def dsnt_loss(pred_coords: Landmark, target_coords: Landmark, pred_norm: Heatmap3D, target_norm: Heatmap3D,
              cfg: LossConfig = LossConfig()) -> float:
    mse = coord_mse(pred_coords, target_coords)
    if cfg.alpha == 0:
        return mse
    return mse + cfg.alpha * js_divergence(pred_norm, target_norm)


def normalize_target(h) -> np.ndarray:
    """Rescale a peak-1 target heatmap to unit mass for the divergence term."""
    t = np.asarray(_data(h), dtype=np.float64)
    s = t.sum()
    if s <= 0:
        raise AllZeroTargetError("cannot normalize an all-zero target")
    return t / s


# batched graph versions ----------------------------------------------------

def wmse_masks(targets: np.ndarray) -> np.ndarray:
    """Per-voxel weights for a (B, X, Y, Z) batch, each sample weighted on its own."""
    masks = np.empty_like(targets)
    for b, t in enumerate(targets):
        w = wmse_weights(t)
        masks[b] = np.where(t > 0, w.w_p, w.w_z)
    return masks


def wmse_loss_t(pred: T.Tensor, targets: np.ndarray, masks: np.ndarray | None = None) -> T.Tensor:
    """Mean over batch and voxels of ``mask * (pred - target)**2``; pred is (B,X,Y,Z,1)."""
    targets = np.asarray(targets, dtype=pred.dtype)[..., None]
    if pred.shape != targets.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {targets.shape}")
    masks = wmse_masks(targets[..., 0])[..., None] if masks is None else np.asarray(masks, dtype=pred.dtype).reshape(targets.shape)
    return T.mean_all(T.mul(T.square(T.add(pred, -targets)), masks.astype(pred.dtype)))


def coord_mse_t(coords: T.Tensor, targets: np.ndarray) -> T.Tensor:
    targets = np.asarray(targets, dtype=coords.dtype)
    if coords.shape != targets.shape:
        raise ValueError(f"shape mismatch: {coords.shape} vs {targets.shape}")
    return T.mean_all(T.square(T.add(coords, -targets)))


def js_divergence_t(probs: T.Tensor, targets: np.ndarray) -> T.Tensor:
    """Batch-mean JS divergence between predicted (B,X,Y,Z,1) and target distributions."""
    p = probs.value
    q = np.asarray(targets, dtype=p.dtype).reshape(p.shape)
    sums = q.reshape(q.shape[0], -1).sum(axis=1)
    if np.abs(sums - 1).max() > NORM_TOL:
        raise ValueError("js_divergence_t: targets must be normalized per sample")
    B = p.shape[0]
    m = 0.5 * (p + q)
    safe_m = np.where(m > 0, m, 1.0)
    per_voxel = 0.5 * _xlogy(p, p / safe_m) + 0.5 * _xlogy(q, q / safe_m)
    value = per_voxel.reshape(B, -1).sum(axis=1).mean()

    def backward(g):
        dp = np.where(p > 0, 0.5 * (np.log(np.where(p > 0, p, 1.0)) - np.log(safe_m)), 0.0)
        return ((g / B) * dp.astype(p.dtype),)

    return T.make_op(np.asarray(value, dtype=p.dtype), (probs,), backward, "js_divergence")


def dsnt_forward_t(logits: T.Tensor, grids: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
    """Softmax-normalize the logits and take expected coordinates. Returns (probs, coords)."""
    probs = T.softmax_voxels(logits)
    return probs, T.frobenius_inner(probs, grids)


def dsnt_loss_t(logits: T.Tensor, target_coords: np.ndarray, target_dists: np.ndarray, grids: np.ndarray,
                alpha: float = 1.0) -> tuple[T.Tensor, T.Tensor]:
    """Coordinate MSE plus ``alpha`` times JS divergence. Returns (loss, coords)."""
    probs, coords = dsnt_forward_t(logits, grids)
    loss = coord_mse_t(coords, target_coords)
    if alpha:
        loss = T.add(loss, T.mul(js_divergence_t(probs, target_dists), np.asarray(alpha, dtype=logits.dtype)))
    return loss, coords
