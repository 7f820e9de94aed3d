"""3D volumes, landmarks and the geometry shared by every other module.

Arrays are stored as ``(Nx, Ny, Nz)`` C-ordered numpy arrays, so the flat
index is ``x*Ny*Nz + y*Nz + z`` (x slowest).  World coordinates are in mm:
``world = origin_mm + index * spacing_mm``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

FRAMES = ("voxel", "normalized", "world_mm")


def _triple(values, dtype=float) -> tuple:
    arr = np.asarray(values, dtype=dtype).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"expected 3 components, got {np.asarray(values).shape}")
    return tuple(arr.tolist())


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Dense scalar volume with voxel spacing and world origin (both mm)."""

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        spacing = _triple(self.spacing_mm)
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", _triple(self.origin_mm))

    @property
    def shape(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data) -> "Volume3D":
        return replace(self, data=np.asarray(data))


@dataclass(frozen=True)
class Landmark:
    """A named 3D point in one of the voxel, normalized or world-mm frames."""

    id: str
    frame: str
    coords: tuple

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}; expected one of {FRAMES}")
        object.__setattr__(self, "coords", _triple(self.coords))

    def array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)


@dataclass(frozen=True)
class RoiBox:
    """Placement of a cropped ROI inside its parent volume.

    ``origin_voxel`` is the parent index of ROI voxel (0, 0, 0) before any
    flip.  When ``flipped_x`` is set, ROI x-index ``i`` corresponds to the
    unflipped ROI index ``size[0] - 1 - i``.
    """

    origin_voxel: tuple
    size: tuple = (64, 64, 64)
    flipped_x: bool = False

    def __post_init__(self):
        object.__setattr__(self, "origin_voxel", _triple(self.origin_voxel, int))
        object.__setattr__(self, "size", _triple(self.size, int))
        if min(self.size) < 2:
            raise ValueError(f"ROI size components must be >= 2, got {self.size}")


def _check_shape(shape) -> np.ndarray:
    shape = np.asarray(shape, dtype=int).reshape(-1)
    if shape.shape != (3,):
        raise ValueError(f"shape must have 3 components, got {shape.tolist()}")
    if (shape < 2).any():
        raise ValueError(f"normalized coordinates need every axis >= 2, got {shape.tolist()}")
    return shape


def voxel_to_normalized(index, shape) -> np.ndarray:
    """Map voxel indices to [-1, 1]; voxel centers 0 and N-1 land on -1 and +1."""
    n = _check_shape(shape)
    return -1.0 + 2.0 * np.asarray(index, dtype=float) / (n - 1)


def normalized_to_voxel(coords, shape) -> np.ndarray:
    n = _check_shape(shape)
    return (np.asarray(coords, dtype=float) + 1.0) * (n - 1) / 2.0


def voxel_to_world(index, volume: Volume3D) -> np.ndarray:
    return np.asarray(volume.origin_mm) + np.asarray(index, dtype=float) * np.asarray(volume.spacing_mm)


def world_to_voxel(point_mm, volume: Volume3D) -> np.ndarray:
    return (np.asarray(point_mm, dtype=float) - np.asarray(volume.origin_mm)) / np.asarray(volume.spacing_mm)


def convert_landmark(lm: Landmark, volume: Volume3D, frame: str) -> Landmark:
    """Express ``lm`` in ``frame`` using the geometry of ``volume``."""
    if frame not in FRAMES:
        raise ValueError(f"unknown frame {frame!r}")
    if lm.frame == frame:
        return lm
    if lm.frame == "voxel":
        vox = lm.array()
    elif lm.frame == "normalized":
        vox = normalized_to_voxel(lm.array(), volume.shape)
    else:
        vox = world_to_voxel(lm.array(), volume)
    if frame == "voxel":
        out = vox
    elif frame == "normalized":
        out = voxel_to_normalized(vox, volume.shape)
    else:
        out = voxel_to_world(vox, volume)
    return Landmark(lm.id, frame, out)


def trilinear_sample(data: np.ndarray, coords: np.ndarray, mode: str = "zero") -> np.ndarray:
    """Trilinear interpolation of ``data`` at fractional voxel ``coords``.

    ``coords`` has shape ``(..., 3)``.  With ``mode="zero"`` the volume is
    treated as zero outside its voxel centers (neighbours outside the grid
    contribute 0); ``mode="clamp"`` clamps coordinates to the grid first.
    """
    data = np.asarray(data)
    coords = np.asarray(coords, dtype=float)
    lead = coords.shape[:-1]
    c = coords.reshape(-1, 3)
    shape = np.array(data.shape)
    if mode == "clamp":
        c = np.clip(c, 0, shape - 1)
    elif mode != "zero":
        raise ValueError(f"unknown mode {mode!r}")
    base = np.floor(c)
    frac = c - base
    base = base.astype(np.int64)
    flat = data.reshape(-1)
    strides = np.array([shape[1] * shape[2], shape[2], 1])
    out = np.zeros(c.shape[0], dtype=np.result_type(data.dtype, np.float32))
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        ix = base[:, 0] + dx
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            iy = base[:, 1] + dy
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                iz = base[:, 2] + dz
                valid = (ix >= 0) & (ix < shape[0]) & (iy >= 0) & (iy < shape[1]) & (iz >= 0) & (iz < shape[2])
                lin = np.where(valid, ix * strides[0] + iy * strides[1] + iz, 0)
                w = wx * wy * wz
                out += np.where(valid, w * flat[lin], 0.0).astype(out.dtype, copy=False)
    return out.reshape(lead)


def _require_finite(data: np.ndarray, what: str):
    if not np.isfinite(data).all():
        raise ValueError(f"{what}: volume contains non-finite values")


def resample_isotropic(v: Volume3D, target_spacing_mm: float = 1.0) -> Volume3D:
    """Resample to isotropic ``target_spacing_mm`` by trilinear interpolation.

    The output grid keeps the outer edge of the input extent: its first voxel
    center sits half an output voxel inside the input's lower edge.  Samples
    falling beyond the outermost input voxel centers use the edge value.
    """
    t = float(target_spacing_mm)
    if not np.isfinite(t) or t <= 0:
        raise ValueError(f"target spacing must be > 0, got {target_spacing_mm}")
    _require_finite(v.data, "resample_isotropic")
    spacing = np.asarray(v.spacing_mm)
    shape_in = np.asarray(v.shape)
    if np.allclose(spacing, t, rtol=0, atol=1e-12):
        return Volume3D(v.data.copy(), (t, t, t), v.origin_mm)
    shape_out = np.maximum(2, np.rint(shape_in * spacing / t).astype(int))
    lower_edge = np.asarray(v.origin_mm) - spacing / 2
    origin_out = lower_edge + t / 2
    axes = [origin_out[a] + t * np.arange(shape_out[a]) for a in range(3)]
    world = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    index = (world - np.asarray(v.origin_mm)) / spacing
    data = trilinear_sample(v.data, index, mode="clamp").astype(v.data.dtype if v.data.dtype.kind == "f" else np.float64)
    return Volume3D(data, (t, t, t), tuple(origin_out))


def normalize_intensity(v: Volume3D) -> Volume3D:
    """Min-max rescale to [0, 1]; a constant volume becomes all zeros."""
    _require_finite(v.data, "normalize_intensity")
    data = np.asarray(v.data, dtype=np.float64 if v.data.dtype == np.float64 else np.float32)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return v.with_data(np.zeros_like(data))
    out = (data - lo) / (hi - lo)
    return v.with_data(np.clip(out, 0, 1))


def crop_roi(v: Volume3D, center_voxel, size=(64, 64, 64)) -> tuple:
    """Crop a ``size`` box centered on ``center_voxel``; outside voxels are zero.

    Returns ``(roi, box)``; the ROI's origin_mm is set so world positions are
    unchanged.
    """
    size = np.asarray(_triple(size, int))
    if (size < 2).any():
        raise ValueError(f"ROI size components must be >= 2, got {size.tolist()}")
    center = np.floor(np.asarray(center_voxel, dtype=float)).astype(int)
    origin = center - size // 2
    shape = np.asarray(v.shape)
    out = np.zeros(tuple(size), dtype=v.data.dtype)
    lo = np.maximum(origin, 0)
    hi = np.minimum(origin + size, shape)
    if (hi > lo).all():
        src = tuple(slice(lo[a], hi[a]) for a in range(3))
        dst = tuple(slice(lo[a] - origin[a], hi[a] - origin[a]) for a in range(3))
        out[dst] = v.data[src]
    origin_mm = voxel_to_world(origin, v)
    box = RoiBox(tuple(origin), tuple(size), False)
    return Volume3D(out, v.spacing_mm, tuple(origin_mm)), box


def flip_x(v: Volume3D) -> Volume3D:
    """Mirror the data along x.  Geometry is kept; use the RoiBox to map back."""
    return v.with_data(np.ascontiguousarray(v.data[::-1]))


def flip_landmark_x(lm: Landmark, nx: int) -> Landmark:
    if lm.frame != "voxel":
        raise ValueError("flip_landmark_x expects a voxel-frame landmark")
    x, y, z = lm.coords
    return Landmark(lm.id, "voxel", ((nx - 1) - x, y, z))


def roi_to_parent_voxel(index, box: RoiBox) -> np.ndarray:
    idx = np.array(index, dtype=float)
    if box.flipped_x:
        idx[..., 0] = (box.size[0] - 1) - idx[..., 0]
    return idx + np.asarray(box.origin_voxel)


def parent_to_roi_voxel(index, box: RoiBox) -> np.ndarray:
    idx = np.asarray(index, dtype=float) - np.asarray(box.origin_voxel)
    if box.flipped_x:
        idx = idx.copy()
        idx[..., 0] = (box.size[0] - 1) - idx[..., 0]
    return idx


def flipped_box(box: RoiBox) -> RoiBox:
    return replace(box, flipped_x=not box.flipped_x)
