"""Readers and writers for the on-disk formats.

``rvol``: a JSON sidecar ``<name>.rvol.json`` plus a raw little-endian
float32 payload ``<name>.rvol`` in x-slowest order.  Landmarks are CSV with
header ``case_id,landmark_id,frame,x,y,z``.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .volume import Landmark, Volume3D

LANDMARK_HEADER = ["case_id", "landmark_id", "frame", "x", "y", "z"]


def _rvol_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.name.endswith(".rvol.json"):
        path = path.with_name(path.name[: -len(".json")])
    elif not path.name.endswith(".rvol"):
        path = path.with_name(path.name + ".rvol")
    return path, path.with_name(path.name + ".json")


def write_rvol(path, volume: Volume3D, **extra) -> Path:
    """Write ``volume``; ``extra`` keys (e.g. ``normalized``) go to the sidecar."""
    raw, sidecar = _rvol_paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "shape": list(volume.shape),
        "spacing_mm": list(volume.spacing_mm),
        "origin_mm": list(volume.origin_mm),
        "dtype": "f32le",
        "index_order": "x-slowest",
    }
    meta.update(extra)
    raw.write_bytes(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    return raw


def read_rvol(path) -> tuple[Volume3D, dict]:
    """Return ``(volume, sidecar_dict)``.  Accepts either file of the pair."""
    raw, sidecar = _rvol_paths(path)
    meta = json.loads(sidecar.read_text())
    if meta.get("dtype", "f32le") != "f32le" or meta.get("index_order", "x-slowest") != "x-slowest":
        raise ValueError(f"{sidecar}: unsupported dtype/index order")
    shape = tuple(int(n) for n in meta["shape"])
    payload = np.frombuffer(raw.read_bytes(), dtype="<f4")
    if payload.size != int(np.prod(shape)):
        raise ValueError(f"{raw}: expected {np.prod(shape)} values, found {payload.size}")
    data = payload.reshape(shape).astype(np.float32)
    return Volume3D(data, tuple(meta["spacing_mm"]), tuple(meta["origin_mm"])), meta


def write_landmarks(path, rows) -> Path:
    """``rows`` is an iterable of ``(case_id, Landmark)``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LANDMARK_HEADER)
        for case_id, lm in rows:
            writer.writerow([case_id, lm.id, lm.frame, *(repr(float(c)) for c in lm.coords)])
    return path


def read_landmarks(path) -> list[tuple[str, Landmark]]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LANDMARK_HEADER:
            raise ValueError(f"{path}: bad header {reader.fieldnames}")
        return [
            (row["case_id"], Landmark(row["landmark_id"], row["frame"], (float(row["x"]), float(row["y"]), float(row["z"]))))
            for row in reader
        ]
