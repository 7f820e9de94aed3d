"""Gaussian target heatmaps, softmax normalization, argmax and DSNT decoding."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .volume import Landmark, Volume3D, voxel_to_normalized

NORM_TOL = 1e-5


@dataclass(frozen=True)
class HeatmapConfig:
    sigma_mm: float = 1.5
    cutoff: float = 0.05
    peak: float = 1.0

    def __post_init__(self):
        if not self.sigma_mm > 0:
            raise ValueError(f"sigma_mm must be > 0, got {self.sigma_mm}")
        if not 0 <= self.cutoff < 1:
            raise ValueError(f"cutoff must lie in [0, 1), got {self.cutoff}")
        if self.peak != 1.0:
            raise ValueError("the heatmap peak is fixed at 1.0")

    def cutoff_radius_mm(self) -> float:
        """Distance beyond which the unscaled Gaussian falls under the cutoff."""
        if self.cutoff == 0:
            return float("inf")
        return self.sigma_mm * float(np.sqrt(-2.0 * np.log(self.cutoff)))


@dataclass(frozen=True, eq=False)
class Heatmap3D:
    volume: Volume3D
    normalized: bool = False

    def __post_init__(self):
        data = self.volume.data
        if (data < 0).any():
            raise ValueError("heatmap values must be non-negative")
        if self.normalized and abs(float(data.sum(dtype=np.float64)) - 1.0) > NORM_TOL:
            raise ValueError(f"normalized heatmap sums to {data.sum()}, expected 1")

    @property
    def data(self) -> np.ndarray:
        return self.volume.data

    @property
    def shape(self) -> tuple:
        return self.volume.shape


@dataclass(frozen=True, eq=False)
class CoordGrids:
    """Per-voxel normalized x/y/z coordinates (read-only arrays)."""

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([self.X, self.Y, self.Z], axis=-1)


def render_gaussian_target(center: Landmark, shape, spacing_mm=(1.0, 1.0, 1.0),
                           cfg: HeatmapConfig = HeatmapConfig()) -> Heatmap3D:
    """Render an isotropic Gaussian (sigma in mm) around a voxel-frame ``center``.

    Values under ``cfg.cutoff`` are zeroed first, then the map is rescaled so its
    maximum is exactly 1.
    """
    if center.frame != "voxel":
        raise ValueError("render_gaussian_target expects a voxel-frame center")
    shape = tuple(int(n) for n in shape)
    if min(shape) < 2:
        raise ValueError(f"heatmap shape must be >= 2 per axis, got {shape}")
    c = center.array()
    if (c < 0).any() or (c > np.asarray(shape) - 1).any():
        raise ValueError(f"center {center.coords} lies outside a volume of shape {shape}")
    spacing = np.asarray(spacing_mm, dtype=float)
    d2 = np.zeros(shape)
    for axis in range(3):
        coord = (np.arange(shape[axis]) - c[axis]) * spacing[axis]
        bshape = [1, 1, 1]
        bshape[axis] = shape[axis]
        d2 = d2 + (coord ** 2).reshape(bshape)
    h = np.exp(-d2 / (2.0 * cfg.sigma_mm ** 2))
    h[h < cfg.cutoff] = 0.0
    peak = h.max()
    if peak <= 0:
        raise ValueError("Gaussian target vanished under the cutoff; sigma too small for the spacing")
    h = h / peak
    return Heatmap3D(Volume3D(h, tuple(spacing)), normalized=False)


def softmax_normalize(h) -> Heatmap3D:
    """Softmax over every voxel of a heatmap or raw 3D field."""
    vol = h.volume if isinstance(h, Heatmap3D) else (h if isinstance(h, Volume3D) else Volume3D(np.asarray(h)))
    v = np.asarray(vol.data, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("softmax_normalize: non-finite input")
    e = np.exp(v - v.max())
    return Heatmap3D(vol.with_data(e / e.sum()), normalized=True)


def hard_argmax(h) -> Landmark:
    """Voxel of the maximum value; ties go to the lowest x-slowest linear index."""
    data = h.data if isinstance(h, (Heatmap3D, Volume3D)) else np.asarray(h)
    if data.size == 0:
        raise ValueError("hard_argmax of an empty heatmap")
    # np.argmax returns the first occurrence in C order, i.e. the lowest linear index
    idx = np.unravel_index(int(np.argmax(data)), data.shape)
    return Landmark("argmax", "voxel", tuple(float(i) for i in idx))


@lru_cache(maxsize=16)
def _grids(shape: tuple) -> CoordGrids:
    index = np.stack(np.meshgrid(*(np.arange(n) for n in shape), indexing="ij"), axis=-1)
    coords = voxel_to_normalized(index, shape)
    X, Y, Z = (np.ascontiguousarray(coords[..., a]) for a in range(3))
    for g in (X, Y, Z):
        g.flags.writeable = False
    return CoordGrids(X, Y, Z)


def make_coord_grids(shape) -> CoordGrids:
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < 2:
        raise ValueError(f"coordinate grids need 3 axes of size >= 2, got {shape}")
    return _grids(shape)


def dsnt_extract(hn: Heatmap3D, g: CoordGrids | None = None) -> Landmark:
    """Probability-weighted mean normalized coordinate (Frobenius inner products)."""
    if not isinstance(hn, Heatmap3D) or not hn.normalized:
        raise ValueError("dsnt_extract requires a normalized Heatmap3D")
    g = g if g is not None else make_coord_grids(hn.shape)
    p = np.asarray(hn.data, dtype=np.float64)
    coords = [float(np.sum(p * grid)) for grid in (g.X, g.Y, g.Z)]
    return Landmark("dsnt", "normalized", coords)
