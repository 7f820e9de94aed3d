"""Two-stage wiring: detect both blobs, crop ROIs, mirror left ROIs, map back."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .phantom import SIDES, DetectionError, PhantomCase, detect_roi, load_case
from .volume import (RoiBox, Volume3D, crop_roi, flip_x, flipped_box, normalize_intensity, parent_to_roi_voxel,
                     resample_isotropic, roi_to_parent_voxel, voxel_to_world, world_to_voxel)

log = logging.getLogger(__name__)


@dataclass(eq=False)
class RoiSample:
    """One ROI ready for stage 2, plus what is needed to map results back."""

    case_id: str
    side: str
    roi: Volume3D
    box: RoiBox
    parent_spacing_mm: tuple
    parent_origin_mm: tuple
    truth_voxel: np.ndarray | None = None
    pseudo_voxel: np.ndarray | None = None

    @property
    def key(self) -> str:
        return f"{self.case_id}:{self.side}"

    def to_world(self, roi_index) -> np.ndarray:
        parent = Volume3D(np.zeros((1, 1, 1)), self.parent_spacing_mm, self.parent_origin_mm)
        return voxel_to_world(roi_to_parent_voxel(roi_index, self.box), parent)

    def to_roi(self, point_mm) -> np.ndarray:
        parent = Volume3D(np.zeros((1, 1, 1)), self.parent_spacing_mm, self.parent_origin_mm)
        return parent_to_roi_voxel(world_to_voxel(point_mm, parent), self.box)

    def truth_mm(self) -> np.ndarray:
        return self.to_world(self.truth_voxel)


def prepare_volume(volume: Volume3D, spacing_mm: float = 1.0) -> Volume3D:
    if all(abs(s - spacing_mm) < 1e-9 for s in volume.spacing_mm):
        return volume
    return resample_isotropic(volume, spacing_mm)


def extract_rois(volume: Volume3D, roi_size: int, case_id: str = "", truth: dict | None = None,
                 pseudo: dict | None = None, spacing_mm: float = 1.0, mirror_left: bool = True) -> list[RoiSample]:
    """Resample, detect, crop, mirror the left ROI and rescale each ROI to [0, 1].

    ``truth`` / ``pseudo`` map side to a world-mm Landmark and are carried into
    each ROI's voxel frame.
    """
    vol = prepare_volume(volume, spacing_mm)
    detections = detect_roi(vol, roi_size)
    samples = []
    for side in SIDES:
        center, _ = detections[side]
        roi, box = crop_roi(vol, center, (roi_size,) * 3)
        if side == "left" and mirror_left:
            roi, box = flip_x(roi), flipped_box(box)
        roi = normalize_intensity(roi)
        s = RoiSample(case_id, side, roi, box, vol.spacing_mm, vol.origin_mm)
        if truth is not None:
            s.truth_voxel = s.to_roi(truth[side].coords)
        if pseudo is not None:
            s.pseudo_voxel = s.to_roi(pseudo[side].coords)
        samples.append(s)
    return samples


def case_rois(case: PhantomCase, roi_size: int) -> list[RoiSample]:
    return extract_rois(case.volume, roi_size, case.case_id, case.truth, case.pseudo)


def inside_roi(index, roi_size: int) -> bool:
    index = np.asarray(index)
    return bool((index >= 0).all() and (index <= roi_size - 1).all())


def load_split_rois(dataset_dir, case_ids, roi_size: int, label: str = "pseudo") -> list[RoiSample]:
    """ROIs for ``case_ids``; samples whose ``label`` falls outside the ROI are dropped."""
    out = []
    for cid in case_ids:
        case = load_case(dataset_dir, cid)
        try:
            rois = case_rois(case, roi_size)
        except DetectionError as exc:
            log.warning("stage-1 detection failed for %s: %s", cid, exc)
            continue
        for s in rois:
            idx = s.pseudo_voxel if label == "pseudo" else s.truth_voxel
            if not inside_roi(idx, roi_size):
                log.warning("dropping %s: %s label outside the ROI", s.key, label)
                continue
            out.append(s)
    return out
