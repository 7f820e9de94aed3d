"""Random intensity gain, isotropic scaling and rotation with landmark bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Landmark, Volume3D, trilinear_sample


@dataclass(frozen=True)
class AugmentConfig:
    intensity_range: tuple = (0.8, 1.2)
    scale_range: tuple = (0.9, 1.1)
    rotation_deg_range: tuple = (-10.0, 10.0)
    max_retries: int = 10

    def __post_init__(self):
        for name in ("intensity_range", "scale_range", "rotation_deg_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        lo, hi = self.scale_range
        if lo <= 0:
            raise ValueError("scale_range must be positive")
        lo, hi = self.rotation_deg_range
        if not (-180 < lo and hi < 180):
            raise ValueError("rotation bounds must lie within (-180, 180)")
        if self.intensity_range[0] < 0:
            raise ValueError("intensity gain must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls((1.0, 1.0), (1.0, 1.0), (0.0, 0.0))


@dataclass(frozen=True)
class AugmentParams:
    gain: float
    scale: float
    angles_deg: tuple


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation about x, then y, then z: ``Rz @ Ry @ Rx``."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=float))
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_params(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    gain = rng.uniform(*cfg.intensity_range)
    scale = rng.uniform(*cfg.scale_range)
    angles = rng.uniform(cfg.rotation_deg_range[0], cfg.rotation_deg_range[1], size=3)
    return AugmentParams(float(gain), float(scale), tuple(float(a) for a in angles))


def _is_identity(params: AugmentParams) -> bool:
    return params.scale == 1.0 and all(a == 0.0 for a in params.angles_deg)


def transform_point(point, params: AugmentParams, shape) -> np.ndarray:
    """Map a voxel-frame point through scale*rotation about the volume center."""
    c = (np.asarray(shape, dtype=float) - 1) / 2
    m = params.scale * rotation_matrix(params.angles_deg)
    return m @ (np.asarray(point, dtype=float) - c) + c


def warp(data: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Resample ``data`` so that content at p moves to ``transform_point(p)`` (zero padded)."""
    if _is_identity(params):
        return np.array(data, copy=True)
    shape = data.shape
    c = (np.asarray(shape, dtype=float) - 1) / 2
    inv = rotation_matrix(params.angles_deg).T / params.scale
    grid = np.stack(np.meshgrid(*(np.arange(n) for n in shape), indexing="ij"), axis=-1).reshape(-1, 3)
    src = (grid - c) @ inv.T + c
    return trilinear_sample(data, src, mode="zero").reshape(shape).astype(data.dtype, copy=False)


def apply_params(roi: Volume3D, target: Landmark, params: AugmentParams) -> tuple[Volume3D, Landmark]:
    data = warp(roi.data, params)
    if params.gain != 1.0:
        data = np.clip(data * params.gain, 0.0, 1.0).astype(roi.data.dtype, copy=False)
    moved = transform_point(target.coords, params, roi.shape)
    return roi.with_data(data), Landmark(target.id, "voxel", moved)


def augment_sample(roi: Volume3D, target: Landmark, cfg: AugmentConfig,
                   rng: np.random.Generator) -> tuple[Volume3D, Landmark]:
    """Randomly augment one ROI and carry its voxel-frame target along.

    Geometry is redrawn when the moved target would leave the ROI; after
    ``cfg.max_retries`` failed draws only the intensity gain is applied.
    """
    if target.frame != "voxel":
        raise ValueError("augment_sample expects a voxel-frame target")
    upper = np.asarray(roi.shape) - 1
    t = target.array()
    if (t < 0).any() or (t > upper).any():
        raise ValueError(f"target {target.coords} lies outside the ROI")
    params = None
    for _ in range(cfg.max_retries + 1):
        candidate = sample_params(cfg, rng)
        moved = transform_point(t, candidate, roi.shape)
        if (moved >= 0).all() and (moved <= upper).all():
            params = candidate
            break
    if params is None:
        params = AugmentParams(candidate.gain, 1.0, (0.0, 0.0, 0.0))
    return apply_params(roi, target, params)


def sample_rng(seed: int, *stream) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)``, e.g. ``(seed, epoch, index)``."""
    return np.random.default_rng([int(seed), *(int(s) for s in stream)])
