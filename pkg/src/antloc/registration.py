"""Intensity-based affine registration and target projection.

The recovered transform maps atlas world coordinates to query world
coordinates, ``q = A @ a + t``.  It is found by derivative-free coordinate
descent over 12 parameters (translation, rotation, log-scale, shear) on an
image pyramid, maximizing NCC or minimizing MSE between the query and the
atlas warped onto the query grid, over the voxels where the two overlap.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .augment import rotation_matrix
from .volume import Landmark, Volume3D, resample_isotropic, trilinear_sample, voxel_to_world

PARAM_NAMES = ("tx", "ty", "tz", "rx", "ry", "rz", "sx", "sy", "sz", "hxy", "hxz", "hyz")


@dataclass(frozen=True, eq=False)
class AffineTransform:
    A: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.linalg.det(A) > 0:
            raise ValueError("affine transforms must preserve orientation (det(A) > 0)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.A.T + self.t

    def compose(self, first: "AffineTransform") -> "AffineTransform":
        """``self ∘ first``: apply ``first``, then ``self``."""
        return AffineTransform(self.A @ first.A, self.A @ first.t + self.t)

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.A)
        return AffineTransform(inv, -inv @ self.t)

    def to_dict(self, metric: str | None = None, value: float | None = None) -> dict:
        return {"A": self.A.reshape(-1).tolist(), "t": self.t.tolist(), "metric": metric, "value": value}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineTransform":
        return cls(np.asarray(d["A"], dtype=float).reshape(3, 3), d["t"])


@dataclass(frozen=True)
class RegConfig:
    metric: str = "ncc"
    levels: int = 3
    max_iterations: int = 100
    tolerance: float = 1e-6
    # initial coordinate-descent steps at full resolution: mm, degrees, log-scale, shear
    translation_step: float = 1.0
    rotation_step_deg: float = 1.0
    scale_step: float = 0.01
    shear_step: float = 0.01
    min_step_fraction: float = 1 / 32
    # coarse levels only need to hand a good start to the next level
    coarse_step_fraction: float = 1 / 4

    def __post_init__(self):
        if self.metric not in ("ncc", "mse"):
            raise ValueError(f"metric must be 'ncc' or 'mse', got {self.metric!r}")
        if self.levels < 1 or self.max_iterations < 1:
            raise ValueError("levels and max_iterations must be >= 1")

    def steps(self) -> np.ndarray:
        return np.array([self.translation_step] * 3 + [self.rotation_step_deg] * 3
                        + [self.scale_step] * 3 + [self.shear_step] * 3, dtype=float)


@dataclass
class RegistrationResult:
    transform: AffineTransform
    value: float
    metric: str
    params: np.ndarray
    n_evaluations: int = 0
    accepted: list = field(default_factory=list)  # accepted costs, one list per level (coarse first)

    def to_json(self) -> str:
        return json.dumps(self.transform.to_dict(self.metric, self.value), indent=2)


def params_to_transform(params, center_mm) -> AffineTransform:
    """Affine with rotation, scale and shear about ``center_mm``, then translation."""
    p = np.asarray(params, dtype=float)
    shear = np.array([[1.0, p[9], p[10]], [0.0, 1.0, p[11]], [0.0, 0.0, 1.0]])
    A = rotation_matrix(p[3:6]) @ np.diag(np.exp(p[6:9])) @ shear
    c = np.asarray(center_mm, dtype=float)
    return AffineTransform(A, c + p[0:3] - A @ c)


def _voxel_affine(moving: Volume3D, transform: AffineTransform, fixed: Volume3D):
    """Fixed-voxel -> moving-voxel map equivalent to ``transform^{-1}`` in world space."""
    inv = transform.inverse()
    s_f, s_m = np.asarray(fixed.spacing_mm), np.asarray(moving.spacing_mm)
    o_f, o_m = np.asarray(fixed.origin_mm), np.asarray(moving.origin_mm)
    return (inv.A * s_f[None, :]) / s_m[:, None], (inv.A @ o_f + inv.t - o_m) / s_m


def warp_to_grid(moving: Volume3D, transform: AffineTransform, fixed: Volume3D) -> np.ndarray:
    """Sample ``moving`` at ``transform^{-1}(q)`` for every voxel q of the ``fixed`` grid.

    Trilinear, zero outside ``moving``.  The world-space map is folded into one
    voxel-to-voxel affine so scipy can do the gather.
    """
    matrix, offset = _voxel_affine(moving, transform, fixed)
    return ndimage.affine_transform(np.asarray(moving.data, dtype=np.float64), matrix, offset,
                                    output_shape=fixed.shape, order=1, mode="grid-constant", cval=0.0)


def overlap_mask(moving: Volume3D, transform: AffineTransform, fixed: Volume3D) -> np.ndarray:
    """Fixed voxels whose source point lies inside the moving grid."""
    matrix, offset = _voxel_affine(moving, transform, fixed)
    axes = [np.arange(n, dtype=np.float64) for n in fixed.shape]
    inside = np.ones(fixed.shape, dtype=bool)
    for k, n in enumerate(moving.shape):
        c = (matrix[k, 0] * axes[0][:, None, None] + matrix[k, 1] * axes[1][None, :, None]
             + matrix[k, 2] * axes[2][None, None, :] + offset[k])
        inside &= (c >= -1e-9) & (c <= n - 1 + 1e-9)
    return inside


def warp_points(moving: Volume3D, transform: AffineTransform, points_mm) -> np.ndarray:
    """Pointwise reference for :func:`warp_to_grid` using the package's own trilinear sampler."""
    src = transform.inverse().apply(np.asarray(points_mm, dtype=float))
    index = (src - np.asarray(moving.origin_mm)) / np.asarray(moving.spacing_mm)
    return trilinear_sample(moving.data, index, mode="zero")


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom == 0:
        return -1.0
    return float(np.dot(a, b) / denom)


def _cost(metric: str, warped: np.ndarray, fixed: np.ndarray, mask: np.ndarray | None = None,
          min_overlap: float = 0.25) -> float:
    if mask is not None:
        # metric over the overlap only, so zero padding cannot pull the fit
        if mask.mean() < min_overlap:
            return np.inf
        warped, fixed = warped[mask], fixed[mask]
    if metric == "ncc":
        return -ncc(warped, fixed)
    return float(np.mean((np.asarray(warped, dtype=np.float64) - fixed) ** 2))


def _pyramid_level(v: Volume3D, factor: int) -> Volume3D:
    if factor == 1:
        return Volume3D(np.asarray(v.data, dtype=np.float64), v.spacing_mm, v.origin_mm)
    smoothed = ndimage.gaussian_filter(np.asarray(v.data, dtype=np.float64), factor / 2.0, mode="constant")
    return resample_isotropic(v.with_data(smoothed), max(v.spacing_mm) * factor)


def register_affine(atlas: Volume3D, query: Volume3D, cfg: RegConfig = RegConfig()) -> RegistrationResult:
    """Fit ``q = A a + t`` aligning ``atlas`` onto ``query``, starting from identity."""
    if not np.allclose(atlas.spacing_mm, query.spacing_mm):
        raise ValueError("atlas and query must share the same spacing")
    if cfg.metric == "ncc" and (np.ptp(atlas.data) == 0 or np.ptp(query.data) == 0):
        raise ValueError("NCC is undefined for constant (zero-variance) images")
    center = voxel_to_world((np.asarray(atlas.shape) - 1) / 2.0, atlas)
    params = np.zeros(12)
    base_steps = cfg.steps()
    n_evals = 0
    accepted = []
    for level in reversed(range(cfg.levels)):
        factor = 2 ** level
        a_lvl, q_lvl = _pyramid_level(atlas, factor), _pyramid_level(query, factor)
        fixed = q_lvl.data

        def cost(p):
            T = params_to_transform(p, center)
            return _cost(cfg.metric, warp_to_grid(a_lvl, T, q_lvl), fixed, overlap_mask(a_lvl, T, q_lvl))

        best = cost(params)
        n_evals += 1
        trace = [best]
        accepted.append(trace)
        steps = base_steps * factor
        floor = steps * (cfg.min_step_fraction if level == 0 else cfg.coarse_step_fraction)
        for _ in range(cfg.max_iterations):
            start = best
            for j in range(12):
                for sign in (1.0, -1.0):
                    trial = params.copy()
                    trial[j] += sign * steps[j]
                    c = cost(trial)
                    n_evals += 1
                    if c < best:
                        params, best = trial, c
                        trace.append(best)
                        break
            if start - best < cfg.tolerance:
                steps = steps / 2
                if (steps < floor).all():
                    break
    transform = params_to_transform(params, center)
    value = -best if cfg.metric == "ncc" else best
    return RegistrationResult(transform, float(value), cfg.metric, params, n_evals, accepted)


def project_target(transform: AffineTransform, atlas_target: Landmark) -> Landmark:
    if atlas_target.frame != "world_mm":
        raise ValueError("project_target expects a world-mm landmark")
    return Landmark(atlas_target.id, "world_mm", transform.apply(atlas_target.array()))


def recovered_rotation_deg(A: np.ndarray) -> np.ndarray:
    """Euler angles (x, y, z order as in :func:`rotation_matrix`) of the rotation part of A."""
    u, _, vt = np.linalg.svd(A)
    r = u @ vt
    ry = np.arcsin(np.clip(-r[2, 0], -1, 1))
    rx = np.arctan2(r[2, 1], r[2, 2])
    rz = np.arctan2(r[1, 0], r[0, 0])
    return np.rad2deg([rx, ry, rz])


def registration_localize(atlas_roi: Volume3D, atlas_target_mm, query_roi: Volume3D,
                          cfg: RegConfig = RegConfig()) -> tuple[Landmark, float, RegistrationResult]:
    """Register the atlas ROI to a query ROI and project the atlas target.

    Both ROIs are registered in ROI-local coordinates (origins moved to 0), so
    the identity start overlaps them even when the parent volumes differ.
    ``atlas_target_mm`` is in the atlas ROI's world frame; the prediction is
    returned in the query ROI's world frame with the elapsed seconds.
    """
    t0 = time.perf_counter()
    a_local = Volume3D(atlas_roi.data, atlas_roi.spacing_mm, (0.0, 0.0, 0.0))
    q_local = Volume3D(query_roi.data, query_roi.spacing_mm, (0.0, 0.0, 0.0))
    result = register_affine(a_local, q_local, cfg)
    target_local = np.asarray(atlas_target_mm, dtype=float) - np.asarray(atlas_roi.origin_mm)
    projected = result.transform.apply(target_local) + np.asarray(query_roi.origin_mm)
    elapsed = time.perf_counter() - t0
    return Landmark("registration", "world_mm", projected), elapsed, result
