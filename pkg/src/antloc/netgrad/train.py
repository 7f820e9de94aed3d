"""Training and inference for the heatmap-matching and DSNT localizers."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .. import loss as L
from ..augment import AugmentConfig, augment_sample, sample_rng
from ..heatmap import HeatmapConfig, make_coord_grids, render_gaussian_target
from ..volume import Landmark, normalized_to_voxel, voxel_to_normalized
from . import tensor as T
from .net import LocalizerNet, localizer_layers
from .optim import AdamState, NonFiniteGradient, adam_step

log = logging.getLogger(__name__)

METHODS = {"hm": "hm_wmse", "hm_wmse": "hm_wmse", "dsnt": "dsnt"}


class TrainingDiverged(RuntimeError):
    """Loss or gradient went non-finite; ``checkpoint`` holds the last good parameters."""

    def __init__(self, message, checkpoint=None, history=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history or []


@dataclass
class TrainConfig:
    method: str = "hm"
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    width: int = 8
    depth: int = 2
    head_kernel: int = 1
    alpha: float = 1.0
    sigma_mm: float = 1.5
    cutoff: float = 0.05
    augment: bool = True
    decode: str = "argmax"
    max_steps: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {sorted(METHODS)}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.decode not in ("argmax", "coords"):
            raise ValueError("decode must be 'argmax' or 'coords'")

    @property
    def loss_variant(self) -> str:
        return METHODS[self.method]

    def heatmap_config(self) -> HeatmapConfig:
        return HeatmapConfig(self.sigma_mm, self.cutoff)


@dataclass
class TrainResult:
    net: LocalizerNet
    config: TrainConfig
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_mre: float = float("inf")
    optimizer: dict = field(default_factory=dict)

    def save(self, directory, **extra):
        meta = {"method": self.config.method, "train_config": asdict(self.config), "epoch": self.best_epoch,
                "val_mre": self.best_val_mre, "seed": self.config.seed, "optimizer": self.optimizer,
                "history": self.history}
        meta.update(extra)
        return self.net.save(directory, **meta)


def _labels(samples, label: str) -> np.ndarray:
    return np.stack([np.asarray(getattr(s, f"{label}_voxel"), dtype=float) for s in samples])


def predict_voxels(net: LocalizerNet, rois: np.ndarray, method: str = "hm", decode: str = "argmax",
                   batch_size: int = 8) -> np.ndarray:
    """Voxel-frame predictions for a stack of ROIs ``(N, X, Y, Z)``.

    Heatmap argmax by default (also for DSNT models); ``decode="coords"`` returns
    the DSNT expected coordinate instead.
    """
    rois = np.asarray(rois)
    shape = rois.shape[1:]
    out = []
    for start in range(0, len(rois), batch_size):
        field_ = net.predict(rois[start:start + batch_size])
        for f in field_:
            if decode == "coords" and METHODS[method] == "dsnt":
                e = np.exp(f.astype(np.float64) - f.max())
                p = e / e.sum()
                g = make_coord_grids(shape)
                norm = [float(np.sum(p * grid)) for grid in (g.X, g.Y, g.Z)]
                out.append(normalized_to_voxel(norm, shape))
            else:
                out.append(np.array(np.unravel_index(int(np.argmax(f)), f.shape), dtype=float))
    return np.array(out).reshape(-1, 3)


def mre_voxels(pred: np.ndarray, target: np.ndarray, spacing=1.0) -> float:
    return float(np.mean(np.linalg.norm((np.asarray(pred) - np.asarray(target)) * spacing, axis=1)))


def _batch(samples, indices, cfg: TrainConfig, epoch: int, labels: np.ndarray, aug_cfg: AugmentConfig | None):
    rois, targets = [], []
    for i in indices:
        s = samples[i]
        lm = Landmark("target", "voxel", labels[i])
        roi = s.roi
        if aug_cfg is not None:
            roi, lm = augment_sample(roi, lm, aug_cfg, sample_rng(cfg.seed, 2, epoch, i))
        rois.append(roi.data)
        targets.append(lm.array())
    return np.stack(rois).astype(np.float32), np.stack(targets)


def _loss(cfg: TrainConfig, out: T.Tensor, targets: np.ndarray, shape, spacing, grids: np.ndarray):
    hcfg = cfg.heatmap_config()
    heat = np.stack([render_gaussian_target(Landmark("t", "voxel", t), shape, spacing, hcfg).data for t in targets])
    if cfg.loss_variant == "hm_wmse":
        return L.wmse_loss_t(out, heat.astype(out.dtype))
    dists = heat / heat.sum(axis=(1, 2, 3), keepdims=True)
    norm_targets = voxel_to_normalized(targets, shape)
    loss, _ = L.dsnt_loss_t(out, norm_targets, dists.astype(out.dtype), grids, cfg.alpha)
    return loss


def train(cfg: TrainConfig, train_set, val_set=None, label: str = "pseudo", val_label: str = "pseudo",
          augment: AugmentConfig | None = None, progress=None) -> TrainResult:
    """Train a localizer on ``RoiSample`` lists; keeps the best-validation epoch.

    Without a validation set the training MRE drives checkpoint selection.
    ``progress`` (optional) is called with each epoch's history entry.
    """
    if not train_set:
        raise ValueError("training set is empty")
    shape = train_set[0].roi.shape
    spacing = np.asarray(train_set[0].roi.spacing_mm)
    labels = _labels(train_set, label)
    val_rois = np.stack([s.roi.data for s in val_set]) if val_set else None
    val_labels = _labels(val_set, val_label) if val_set else None
    aug_cfg = (augment or AugmentConfig()) if cfg.augment else None
    net = LocalizerNet(localizer_layers(cfg.width, cfg.depth, cfg.head_kernel), seed=int(sample_rng(cfg.seed, 0).integers(2**31)))
    state = AdamState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    grids = make_coord_grids(shape).stacked().astype(np.float32)
    result = TrainResult(net, cfg, optimizer=state.hyperparams())
    best_params = copy.deepcopy(net.state_arrays())
    n, steps = len(train_set), 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = sample_rng(cfg.seed, 1, epoch).permutation(n)
        losses, train_err = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, targets = _batch(train_set, idx, cfg, epoch, labels, aug_cfg)
            net.zero_grad()
            out = net(x[..., None])
            loss = _loss(cfg, out, targets, shape, spacing, grids)
            value = float(loss.value)
            if not np.isfinite(value):
                net.load_arrays(best_params)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", copy.deepcopy(result), result.history)
            loss.backward()
            try:
                adam_step({k: p.value for k, p in net.params.items()}, {k: p.grad for k, p in net.params.items()}, state)
            except NonFiniteGradient as exc:
                net.load_arrays(best_params)
                raise TrainingDiverged(str(exc), copy.deepcopy(result), result.history) from exc
            losses.append(value)
            f = out.value[..., 0]
            pred = np.array([np.unravel_index(int(np.argmax(fi)), fi.shape) for fi in f], dtype=float)
            train_err.extend(np.linalg.norm((pred - targets) * spacing, axis=1))
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "train_mre": float(np.mean(train_err))}
        if val_rois is not None:
            pred = predict_voxels(net, val_rois, cfg.method, cfg.decode)
            entry["val_mre"] = mre_voxels(pred, val_labels, spacing)
        entry["seconds"] = time.perf_counter() - t0
        result.history.append(entry)
        score = entry.get("val_mre", entry["train_mre"])
        if score < result.best_val_mre:
            result.best_val_mre, result.best_epoch = score, epoch
            best_params = copy.deepcopy(net.state_arrays())
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in entry.items()})
        if progress is not None:
            progress(entry)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    net.load_arrays(best_params)
    return result


def grid_search(cfg: TrainConfig, train_set, val_set, learning_rates=(1e-2, 1e-3, 1e-4, 1e-5), **kw):
    """Train once per learning rate; pick the lowest validation MRE, ties to the smaller rate.

    Returns ``(best_lr, {lr: TrainResult})``.
    """
    results = {}
    for lr in learning_rates:
        trial = replace(cfg, learning_rate=lr)
        results[lr] = train(trial, train_set, val_set, **kw)
    best = select_learning_rate({lr: r.best_val_mre for lr, r in results.items()})
    return best, results


def select_learning_rate(scores: dict) -> float:
    """Lowest score wins; equal scores resolve to the smaller learning rate."""
    return min(scores, key=lambda lr: (scores[lr], lr))
