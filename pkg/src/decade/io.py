"""On-disk formats: JSON header sidecar plus raw little-endian C-order data."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .phantom import DynamicStudy, FrameSchedule, PhantomSpec, PhantomTruth

STUDY_KEYS = (
    "dims",
    "voxel_mm",
    "frame_starts_s",
    "frame_durations_s",
    "units",
    "count_fraction",
    "seed",
    "phantom_id",
)


class FormatError(ValueError):
    pass


def _paths(base: Path | str) -> tuple[Path, Path]:
    base = Path(base)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    return base.with_suffix(".json"), base.with_suffix(".raw")


def write_study(study: DynamicStudy, base: Path | str) -> tuple[Path, Path]:
    """Write ``<base>.json`` and ``<base>.raw`` (float32, [F, Z, Y, X])."""
    hdr_path, raw_path = _paths(base)
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(study.metadata)
    header = {
        "dims": list(study.frames.shape),
        "voxel_mm": float(study.voxel_mm),
        "frame_starts_s": list(study.schedule.starts_s),
        "frame_durations_s": list(study.schedule.durations_s),
        "units": study.units,
        "count_fraction": float(study.count_fraction),
        "seed": int(meta.pop("seed", 0)),
        "phantom_id": str(meta.pop("phantom_id", "")),
    }
    # conversion constants and other extras ride along under their own names
    header.update({k: v for k, v in meta.items() if k not in header})
    np.ascontiguousarray(study.frames, dtype="<f4").tofile(raw_path)
    hdr_path.write_text(json.dumps(header, indent=2, sort_keys=True))
    return hdr_path, raw_path


def read_study(base: Path | str) -> DynamicStudy:
    hdr_path, raw_path = _paths(base)
    header = json.loads(hdr_path.read_text())
    missing = [k for k in STUDY_KEYS if k not in header]
    if missing:
        raise FormatError(f"{hdr_path}: missing header keys {missing}")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 4:
        raise FormatError(f"{hdr_path}: study dims must be [F, Z, Y, X]")
    data = np.fromfile(raw_path, dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise FormatError(f"{raw_path}: expected {np.prod(dims)} values, found {data.size}")
    schedule = FrameSchedule(tuple(header["frame_starts_s"]), tuple(header["frame_durations_s"]))
    meta = {k: v for k, v in header.items() if k not in STUDY_KEYS or k in ("seed", "phantom_id")}
    return DynamicStudy(
        frames=data.reshape(dims).astype(np.float64),
        schedule=schedule,
        units=header["units"],
        count_fraction=float(header["count_fraction"]),
        voxel_mm=float(header["voxel_mm"]),
        metadata=meta,
    )


def write_volume(volume: np.ndarray, base: Path | str, voxel_mm: float = 4.0, **extra) -> tuple[Path, Path]:
    """Single 3D volume; uint8 volumes (labels) stay uint8, everything else float32."""
    hdr_path, raw_path = _paths(base)
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    dtype = "u1" if volume.dtype == np.uint8 else "<f4"
    np.ascontiguousarray(volume, dtype=dtype).tofile(raw_path)
    header = {"dims": list(volume.shape), "voxel_mm": float(voxel_mm), "dtype": "uint8" if dtype == "u1" else "float32"}
    header.update(extra)
    hdr_path.write_text(json.dumps(header, indent=2, sort_keys=True))
    return hdr_path, raw_path


def read_volume(base: Path | str) -> np.ndarray:
    hdr_path, raw_path = _paths(base)
    header = json.loads(hdr_path.read_text())
    dtype = "u1" if header.get("dtype") == "uint8" else "<f4"
    data = np.fromfile(raw_path, dtype=dtype)
    dims = tuple(header["dims"])
    if data.size != int(np.prod(dims)):
        raise FormatError(f"{raw_path}: size mismatch")
    data = data.reshape(dims)
    return data if dtype == "u1" else data.astype(np.float64)


def write_truth(truth: PhantomTruth, directory: Path | str) -> list[Path]:
    directory = Path(directory)
    vox = truth.spec.voxel_mm
    paths = []
    paths += write_volume(truth.labels.astype(np.uint8), directory / "labels", vox)
    for name in ("K1", "k2", "Vb"):
        paths += write_volume(getattr(truth, name), directory / name, vox)
    paths += write_study(truth.clean, directory / "clean")
    idif = {
        "times_s": truth.clean.schedule.midpoints.tolist(),
        "values": truth.idif.tolist(),
        "aif": vars(truth.spec.aif),
    }
    p = directory / "idif.json"
    p.write_text(json.dumps(idif, indent=2))
    paths.append(p)
    return paths


def read_truth_maps(directory: Path | str) -> dict[str, np.ndarray]:
    directory = Path(directory)
    return {name: read_volume(directory / name) for name in ("labels", "K1", "k2", "Vb")}


def file_sha256(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def spec_to_dict(spec: PhantomSpec) -> dict:
    g = vars(spec.geometry)
    return {
        "dims": list(spec.dims),
        "voxel_mm": spec.voxel_mm,
        "geometry": {k: list(v) if isinstance(v, tuple) else v for k, v in g.items()},
        "tissues": {str(k): vars(v) for k, v in spec.tissues.items()},
        "aif": vars(spec.aif),
        "sensitivity": spec.sensitivity,
        "decay_per_s": spec.decay_per_s,
        "seed": spec.seed,
        "phantom_id": spec.phantom_id,
    }
