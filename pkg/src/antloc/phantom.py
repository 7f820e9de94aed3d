"""Seeded synthetic head phantoms with paired blob "thalami" and exact targets.

Each case holds a smooth low-intensity background, two Gaussian-blurred
ellipsoids mirrored about the mid-sagittal plane (``right`` is the blob with
the larger x), a faint nucleus centered on each true target, and additive
noise.  Pseudo-labels are the truth plus isotropic Gaussian noise, standing
in for labels projected from an atlas by registration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .augment import rotation_matrix
from .io import read_landmarks, read_rvol, write_landmarks, write_rvol
from .volume import (Landmark, RoiBox, Volume3D, crop_roi, flipped_box, parent_to_roi_voxel, roi_to_parent_voxel,
                     voxel_to_world, world_to_voxel)

SIDES = ("right", "left")
MIRROR = np.diag([-1.0, 1.0, 1.0])
# semi-axis proportions of the blobs (longest first)
AXIS_RATIOS = np.array([1.0, 0.8, 0.7])


class DetectionError(RuntimeError):
    """Stage-1 detection could not find two blobs."""


@dataclass(frozen=True)
class PhantomSpec:
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    head_shape: tuple = (128, 128, 128)
    spacing_mm: float = 1.0
    semi_axes_range_mm: tuple = (8.0, 11.0)
    separation_mm: float = 28.0
    position_jitter_mm: float = 2.0
    rotation_range_deg: float = 10.0
    side_jitter_deg: float = 3.0
    blur_mm: float = 1.0
    background_level: float = 0.2
    background_amplitude: float = 0.05
    contrast: float = 0.55
    sigma_bg: float = 0.03
    nucleus_radius_mm: float = 2.5
    nucleus_contrast: float = 0.25
    target_offset: tuple = (0.45, 0.35, 0.3)
    sigma_anat_mm: float = 1.0
    sigma_label_mm: float = 1.5
    roi_size: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "head_shape", tuple(int(n) for n in self.head_shape))
        object.__setattr__(self, "semi_axes_range_mm", tuple(float(a) for a in self.semi_axes_range_mm))
        object.__setattr__(self, "target_offset", tuple(float(a) for a in self.target_offset))
        if min(self.head_shape) < 2 or len(self.head_shape) != 3:
            raise ValueError("head_shape needs three axes >= 2")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_cases < 1:
            raise ValueError("case counts must be non-negative with at least one case")
        sigmas = (self.position_jitter_mm, self.blur_mm, self.sigma_bg, self.sigma_anat_mm, self.sigma_label_mm,
                  self.background_amplitude, self.side_jitter_deg, self.rotation_range_deg)
        if min(sigmas) < 0:
            raise ValueError("noise and jitter levels must be >= 0")
        lo, hi = self.semi_axes_range_mm
        if not 0 < lo <= hi:
            raise ValueError("semi_axes_range_mm must satisfy 0 < lo <= hi")
        if self.spacing_mm <= 0 or self.roi_size < 2:
            raise ValueError("spacing must be > 0 and roi_size >= 2")
        if any(abs(f) >= 1 for f in self.target_offset):
            raise ValueError("target_offset is a fraction of the semi-axes and must lie in (-1, 1)")
        # worst-case blob extent: center jitter (4 sigma) + longest semi-axis + blur
        reach = self.separation_mm / 2 + 4 * self.position_jitter_mm + hi + 3 * self.blur_mm
        extent = np.asarray(self.head_shape) * self.spacing_mm / 2
        if reach >= extent[0] or hi + 4 * self.position_jitter_mm + 3 * self.blur_mm >= extent[1:].min():
            raise ValueError("blobs cannot fit inside the head volume for this spec")
        if self.separation_mm / 2 <= hi + self.blur_mm:
            raise ValueError("separation too small: the two blobs would overlap")

    @property
    def n_cases(self) -> int:
        return self.n_train + self.n_val + self.n_test

    @classmethod
    def fast(cls, **overrides) -> "PhantomSpec":
        """64^3 heads and 32^3 ROIs, for quick experiments and CI."""
        base = dict(head_shape=(64, 64, 64), semi_axes_range_mm=(4.5, 6.5), separation_mm=22.0,
                    position_jitter_mm=1.5, nucleus_radius_mm=1.75, sigma_anat_mm=0.75, roi_size=32)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**known)


@dataclass(frozen=True)
class BlobPose:
    center_mm: np.ndarray
    semi_axes_mm: np.ndarray
    rotation: np.ndarray


@dataclass(frozen=True)
class CaseGeometry:
    case_id: str
    poses: dict
    truth: dict
    pseudo: dict


@dataclass(frozen=True, eq=False)
class PhantomCase:
    case_id: str
    volume: Volume3D
    truth: dict
    pseudo: dict
    mask: np.ndarray = field(repr=False)

    def landmarks(self) -> list[tuple[str, Landmark]]:
        rows = []
        for side in SIDES:
            rows.append((self.case_id, self.truth[side]))
            rows.append((self.case_id, self.pseudo[side]))
        return rows


def case_ids(spec: PhantomSpec) -> list[str]:
    return [f"case{i:04d}" for i in range(spec.n_cases)]


def split_assignment(spec: PhantomSpec) -> dict[str, list[str]]:
    ids = case_ids(spec)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return {"train": ids[:a], "val": ids[a:b], "test": ids[b:]}


def _rng(spec: PhantomSpec, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index, stream])


def _head_center_mm(spec: PhantomSpec) -> np.ndarray:
    return (np.asarray(spec.head_shape) - 1) * spec.spacing_mm / 2


def case_geometry(spec: PhantomSpec, index: int, case_id: str | None = None, canonical: bool = False) -> CaseGeometry:
    """Blob poses, true targets and pseudo-labels of case ``index`` (no rendering).

    ``canonical`` gives the noise-free mean anatomy used for the atlas.
    """
    rng = _rng(spec, index, 0)
    lo, hi = spec.semi_axes_range_mm
    head = _head_center_mm(spec)
    if canonical:
        base_axes = 0.5 * (lo + hi) * AXIS_RATIOS
        base_angles = np.zeros(3)
        shift = np.zeros(3)
    else:
        base_axes = rng.uniform(lo, hi) * AXIS_RATIOS * rng.uniform(0.9, 1.1, size=3)
        base_angles = rng.uniform(-spec.rotation_range_deg, spec.rotation_range_deg, size=3)
        shift = rng.normal(0.0, spec.position_jitter_mm, size=3)
    poses, truth = {}, {}
    offset = np.asarray(spec.target_offset)
    for side in SIDES:
        sign = 1.0 if side == "right" else -1.0
        if canonical:
            angles, axes, local_shift, anat = base_angles, base_axes, np.zeros(3), np.zeros(3)
        else:
            angles = base_angles + rng.uniform(-spec.side_jitter_deg, spec.side_jitter_deg, size=3)
            axes = base_axes * rng.uniform(0.95, 1.05, size=3)
            local_shift = rng.normal(0.0, 0.25 * spec.position_jitter_mm, size=3)
            anat = rng.normal(0.0, spec.sigma_anat_mm, size=3)
        rot = rotation_matrix(angles)
        center = head + shift + local_shift + np.array([sign * spec.separation_mm / 2, 0.0, 0.0])
        if side == "left":
            rot = MIRROR @ rot @ MIRROR
        local = offset * axes * np.array([sign, 1.0, 1.0])
        poses[side] = BlobPose(center, np.asarray(axes), rot)
        truth[side] = center + rot @ local + anat
    label_rng = _rng(spec, index, 1)
    pseudo = {side: truth[side] + (0.0 if canonical else label_rng.normal(0.0, spec.sigma_label_mm, size=3))
              for side in SIDES}
    cid = case_id or f"case{index:04d}"
    return CaseGeometry(cid, poses, truth, pseudo)


def _paint_ellipsoid(shape, spacing, pose: BlobPose) -> np.ndarray:
    """Boolean mask of voxel centers inside the ellipsoid."""
    out = np.zeros(shape, dtype=bool)
    reach = pose.semi_axes_mm.max() + spacing
    lo = np.maximum(np.floor((pose.center_mm - reach) / spacing).astype(int), 0)
    hi = np.minimum(np.ceil((pose.center_mm + reach) / spacing).astype(int) + 1, shape)
    if (hi <= lo).any():
        return out
    grid = np.stack(np.meshgrid(*(np.arange(lo[a], hi[a]) * spacing for a in range(3)), indexing="ij"), axis=-1)
    local = (grid - pose.center_mm) @ pose.rotation  # R^T (p - c), row-wise
    out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = np.sum((local / pose.semi_axes_mm) ** 2, axis=-1) <= 1.0
    return out


def _background(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    shape = spec.head_shape
    field_ = np.full(shape, spec.background_level)
    if spec.background_amplitude > 0:
        coords = np.meshgrid(*(np.linspace(0, 1, n) for n in shape), indexing="ij")
        for _ in range(3):
            k = rng.uniform(0.5, 1.5, size=3)
            phase = rng.uniform(0, 2 * np.pi)
            arg = sum(2 * np.pi * k[a] * coords[a] for a in range(3)) + phase
            field_ += (spec.background_amplitude / 3) * np.cos(arg)
    return field_


def render_case(spec: PhantomSpec, geom: CaseGeometry, noise_index: int, noise: bool = True) -> PhantomCase:
    rng = _rng(spec, noise_index, 2)
    s = spec.spacing_mm
    vol = _background(spec, rng)
    mask = np.zeros(spec.head_shape, dtype=np.uint8)
    blobs = np.zeros(spec.head_shape)
    for label, side in enumerate(SIDES, start=1):
        pose = geom.poses[side]
        inside = _paint_ellipsoid(spec.head_shape, s, pose)
        mask[inside] = label
        nucleus = BlobPose(geom.truth[side], np.full(3, spec.nucleus_radius_mm), np.eye(3))
        in_nucleus = _paint_ellipsoid(spec.head_shape, s, nucleus)
        blobs += spec.contrast * inside + spec.nucleus_contrast * (in_nucleus & inside)
    if spec.blur_mm > 0:
        blobs = ndimage.gaussian_filter(blobs, spec.blur_mm / s, mode="constant")
    vol = vol + blobs
    if noise and spec.sigma_bg > 0:
        vol = vol + rng.normal(0.0, spec.sigma_bg, size=vol.shape)
    volume = Volume3D(vol.astype(np.float32), (s, s, s), (0.0, 0.0, 0.0))
    truth = {side: Landmark(f"{side}_truth", "world_mm", geom.truth[side]) for side in SIDES}
    pseudo = {side: Landmark(f"{side}_pseudo", "world_mm", geom.pseudo[side]) for side in SIDES}
    return PhantomCase(geom.case_id, volume, truth, pseudo, mask)


def generate_case(spec: PhantomSpec, index: int) -> PhantomCase:
    return render_case(spec, case_geometry(spec, index), index)


def generate_atlas(spec: PhantomSpec) -> PhantomCase:
    """Canonical-anatomy case with exact targets, rendered with its own noise draw."""
    index = spec.n_cases + 1_000_000
    return render_case(spec, case_geometry(spec, index, case_id="atlas", canonical=True), index)


def iter_cases(spec: PhantomSpec):
    for index in range(spec.n_cases):
        yield generate_case(spec, index)


def generate_dataset(spec: PhantomSpec) -> tuple[list[PhantomCase], dict]:
    """All cases in memory plus the manifest (use :func:`write_dataset` for large heads)."""
    return list(iter_cases(spec)), make_manifest(spec)


def make_manifest(spec: PhantomSpec) -> dict:
    return {"format": "antloc-phantoms/1", "spec": spec.to_dict(), "seed": spec.seed,
            "splits": split_assignment(spec), "atlas": "atlas", "sides": list(SIDES)}


# ---------------------------------------------------------------- disk layout

def write_case(case: PhantomCase, case_dir) -> Path:
    case_dir = Path(case_dir)
    write_rvol(case_dir / "volume.rvol", case.volume)
    write_rvol(case_dir / "mask.rvol", case.volume.with_data(case.mask.astype(np.float32)),
               labels={"1": "right", "2": "left"})
    write_landmarks(case_dir / "landmarks.csv", case.landmarks())
    return case_dir


def read_case(case_dir) -> PhantomCase:
    case_dir = Path(case_dir)
    volume, _ = read_rvol(case_dir / "volume.rvol")
    mask_vol, _ = read_rvol(case_dir / "mask.rvol")
    truth, pseudo, cid = {}, {}, case_dir.name
    for cid, lm in read_landmarks(case_dir / "landmarks.csv"):
        side, kind = lm.id.split("_", 1)
        (truth if kind == "truth" else pseudo)[side] = lm
    return PhantomCase(cid, volume, truth, pseudo, mask_vol.data.astype(np.uint8))


def write_dataset(spec: PhantomSpec, out_dir) -> dict:
    """Stream every case (and the atlas) to ``out_dir``; returns the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    for case in iter_cases(spec):
        write_case(case, out / "cases" / case.case_id)
    write_case(generate_atlas(spec), out / "atlas")
    manifest = make_manifest(spec)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def manifest_hash(dataset_dir) -> str:
    return hashlib.sha256((Path(dataset_dir) / "manifest.json").read_bytes()).hexdigest()


def load_manifest(dataset_dir) -> dict:
    return json.loads((Path(dataset_dir) / "manifest.json").read_text())


def load_case(dataset_dir, case_id: str) -> PhantomCase:
    base = Path(dataset_dir)
    return read_case(base / "atlas" if case_id == "atlas" else base / "cases" / case_id)


# ------------------------------------------------------------------- stage 1

def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Threshold maximizing the between-class variance of a histogram."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if hi == lo:
        return float(lo)
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    mu0 = s0 / np.maximum(w0, 1)
    mu1 = (s0[-1] - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(edges[int(np.argmax(between[:-1])) + 1])


def foreground_threshold(values: np.ndarray, max_fraction: float = 0.05, max_rounds: int = 8) -> float:
    """Otsu threshold, re-applied to the upper class while it covers too much of the volume.

    Small bright structures in a large background otherwise pull plain Otsu
    into splitting the background itself.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    t = otsu_threshold(values)
    for _ in range(max_rounds):
        upper = values[values > t]
        if upper.size <= max_fraction * values.size or upper.size < 2:
            break
        t = otsu_threshold(upper)
    return t


def detect_roi(volume: Volume3D, roi_size=64, smoothing_voxels: float = 1.0) -> dict:
    """Find the two blobs: smoothed Otsu-style threshold, 26-connected components, centroids.

    Returns ``{side: (center_voxel, RoiBox)}``; ``right`` is the component
    with the larger centroid x.
    """
    data = np.asarray(volume.data, dtype=np.float64)
    if smoothing_voxels > 0:
        data = ndimage.gaussian_filter(data, smoothing_voxels)
    fg = data > foreground_threshold(data)
    labels, n = ndimage.label(fg, structure=np.ones((3, 3, 3), dtype=bool))
    if n < 2:
        raise DetectionError(f"expected two blobs, found {n} component(s)")
    sizes = np.bincount(labels.ravel())[1:]
    largest = np.argsort(-sizes, kind="stable")[:2] + 1
    centroids = [np.argwhere(labels == lab).mean(axis=0) for lab in largest]
    centroids.sort(key=lambda c: c[0], reverse=True)
    size = (roi_size,) * 3 if np.isscalar(roi_size) else tuple(roi_size)
    out = {}
    for side, c in zip(SIDES, centroids):
        center = np.rint(c).astype(int)
        _, box = crop_roi(Volume3D(np.zeros((1, 1, 1))), center, size)
        out[side] = (tuple(center.tolist()), RoiBox(box.origin_voxel, size, False))
    return out


def frame_roundtrip(case: PhantomCase, roi_size=64) -> dict:
    """Per-side world-mm error of truth -> ROI voxel -> truth through detect/crop/flip."""
    errors = {}
    for side, (_, box) in detect_roi(case.volume, roi_size).items():
        if side == "left":
            box = flipped_box(box)
        roi_index = parent_to_roi_voxel(world_to_voxel(case.truth[side].coords, case.volume), box)
        back = voxel_to_world(roi_to_parent_voxel(roi_index, box), case.volume)
        errors[side] = float(np.linalg.norm(back - case.truth[side].array()))
    return errors
