"""MetaImage volumes and the annotation / detection CSV formats."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .boxes import DetectionBox

_DTYPES = {"MET_SHORT": "i2", "MET_FLOAT": "f4"}


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def _parse_header(path: Path) -> dict[str, str]:
    header = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
    return header


def read_mhd(header_path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Array in (z, y, x) order plus spacing and origin remapped to (z, y, x)."""
    path = Path(header_path)
    h = _parse_header(path)
    if h.get("NDims", "3") != "3":
        raise DataError(f"{path}: only 3-D images are supported")
    etype = h.get("ElementType")
    if etype not in _DTYPES:
        raise DataError(f"{path}: unsupported ElementType {etype!r}")
    try:
        dims = [int(v) for v in h["DimSize"].split()]
        raw_name = h["ElementDataFile"]
    except KeyError as exc:
        raise DataError(f"{path}: missing header key {exc}") from None
    spacing = [float(v) for v in h.get("ElementSpacing", "1 1 1").split()]
    origin = [float(v) for v in h.get("Offset", h.get("Origin", "0 0 0")).split()]
    msb = h.get("BinaryDataByteOrderMSB", h.get("ElementByteOrderMSB", "False")).lower() == "true"
    dtype = np.dtype(("<" if not msb else ">") + _DTYPES[etype])
    raw_path = path.parent / raw_name
    if not raw_path.exists():
        raise DataError(f"{path}: raw file {raw_path} not found")
    data = np.fromfile(raw_path, dtype=dtype)
    if data.size != int(np.prod(dims)):
        raise DataError(f"{path}: DimSize {dims} needs {int(np.prod(dims))} elements, raw has {data.size}")
    # header order is (x, y, z) with x fastest
    arr = data.reshape(dims[::-1]).astype(dtype.newbyteorder("="))
    return arr, np.array(spacing[::-1]), np.array(origin[::-1])


def write_mhd(header_path, array: np.ndarray, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Path:
    """Write a (z, y, x) array as MET_FLOAT or MET_SHORT little-endian MetaImage."""
    path = Path(header_path)
    array = np.asarray(array)
    etype = "MET_SHORT" if array.dtype == np.int16 else "MET_FLOAT"
    raw = path.with_suffix(".raw")
    array.astype("<" + _DTYPES[etype]).tofile(raw)
    fmt = lambda v: " ".join(repr(float(x)) for x in v)  # noqa: E731
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"Offset = {fmt(np.asarray(origin)[::-1])}",
        f"ElementSpacing = {fmt(np.asarray(spacing)[::-1])}",
        f"DimSize = {' '.join(str(d) for d in array.shape[::-1])}",
        f"ElementType = {etype}",
        f"ElementDataFile = {raw.name}",
    ]
    path.write_text("\n".join(lines) + "\n")
    return path


# -- coordinates -----------------------------------------------------------
def voxel_to_world(zyx, spacing, origin) -> np.ndarray:
    return np.asarray(zyx, dtype=np.float64) * np.asarray(spacing) + np.asarray(origin)


def world_to_voxel(zyx, spacing, origin) -> np.ndarray:
    return (np.asarray(zyx, dtype=np.float64) - np.asarray(origin)) / np.asarray(spacing)


def _mean_spacing(spacing) -> float:
    # diameters convert with the in-plane spacing, as cubes are isotropic in voxels
    return float(np.mean(np.asarray(spacing)[1:]))


# -- annotations -----------------------------------------------------------
ANNOTATION_HEADER = ["series_id", "z", "y", "x", "diameter"]
WORLD_ANNOTATION_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"]


def write_annotations(path, annotations: dict[str, np.ndarray], world: bool = False, geometry=None):
    """``annotations`` maps series id -> (n, 4) voxel rows (z, y, x, d).

    With ``world`` the LUNA16 convention is written (x, y, z in mm); this
    needs ``geometry`` mapping series id -> (spacing, origin).
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WORLD_ANNOTATION_HEADER if world else ANNOTATION_HEADER)
        for sid in sorted(annotations):
            for z, y, x, d in np.asarray(annotations[sid], dtype=np.float64).reshape(-1, 4):
                if world:
                    spacing, origin = _geometry(geometry, sid)
                    wz, wy, wx = voxel_to_world((z, y, x), spacing, origin)
                    w.writerow([sid, repr(float(wx)), repr(float(wy)), repr(float(wz)), repr(float(d * _mean_spacing(spacing)))])
                else:
                    w.writerow([sid] + [repr(float(v)) for v in (z, y, x, d)])


def read_annotations(path, world: bool = False, geometry=None) -> dict[str, np.ndarray]:
    out: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = WORLD_ANNOTATION_HEADER if world else ANNOTATION_HEADER
        if reader.fieldnames != expected:
            raise DataError(f"{path}: expected header {expected}, got {reader.fieldnames}")
        for row in reader:
            if world:
                sid = row["seriesuid"]
                spacing, origin = _geometry(geometry, sid)
                zyx = world_to_voxel([float(row[k]) for k in ("coordZ", "coordY", "coordX")], spacing, origin)
                d = float(row["diameter_mm"]) / _mean_spacing(spacing)
                out.setdefault(sid, []).append([*zyx, d])
            else:
                sid = row["series_id"]
                out.setdefault(sid, []).append([float(row[k]) for k in ("z", "y", "x", "diameter")])
    return {k: np.array(v, dtype=np.float64).reshape(-1, 4) for k, v in out.items()}


def _geometry(geometry, sid):
    if geometry is None or sid not in geometry:
        raise DataError(f"no spacing/origin available for series {sid!r}")
    spacing, origin = geometry[sid]
    return np.asarray(spacing, dtype=np.float64), np.asarray(origin, dtype=np.float64)


# -- detections ------------------------------------------------------------
DETECTION_HEADER = ["series_id", "z", "y", "x", "diameter_vox", "score"]
WORLD_DETECTION_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm", "probability"]


def write_detections(path, detections: dict[str, list[DetectionBox]], world: bool = False, geometry=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WORLD_DETECTION_HEADER if world else DETECTION_HEADER)
        for sid in sorted(detections):
            for b in detections[sid]:
                if world:
                    spacing, origin = _geometry(geometry, sid)
                    wz, wy, wx = voxel_to_world((b.z, b.y, b.x), spacing, origin)
                    vals = (wx, wy, wz, b.d * _mean_spacing(spacing), b.score)
                else:
                    vals = (b.z, b.y, b.x, b.d, b.score)
                w.writerow([sid] + [repr(float(v)) for v in vals])


def read_detections(path, world: bool = False, geometry=None) -> dict[str, list[DetectionBox]]:
    out: dict[str, list[DetectionBox]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = WORLD_DETECTION_HEADER if world else DETECTION_HEADER
        if reader.fieldnames != expected:
            raise DataError(f"{path}: expected header {expected}, got {reader.fieldnames}")
        for row in reader:
            if world:
                sid = row["seriesuid"]
                spacing, origin = _geometry(geometry, sid)
                z, y, x = world_to_voxel([float(row[k]) for k in ("coordZ", "coordY", "coordX")], spacing, origin)
                box = DetectionBox(z, y, x, float(row["diameter_mm"]) / _mean_spacing(spacing), float(row["probability"]))
            else:
                sid = row["series_id"]
                box = DetectionBox(*(float(row[k]) for k in ("z", "y", "x", "diameter_vox", "score")))
            out.setdefault(sid, []).append(box)
    return out
