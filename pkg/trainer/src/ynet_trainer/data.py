"""File-format readers and writers shared with the core toolkit.

The trainer talks to the core only through files, so the dataset and WMK
readers here are independent implementations of the documented layouts:

* dataset directory: ``manifest.json`` + ``pairs.bin`` with records of
  x1, x2, y as interleaved complex64 followed by one float32 energy;
* WMK directory: ``header.json`` + ``data.bin`` (little-endian float32,
  complex interleaved, x fastest among voxels) + optional uint8 masks.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class DatasetError(IOError):
    """Dataset directory is missing, inconsistent with its manifest, or empty."""


def load_dataset(path):
    """Read a dataset directory -> (x1, x2, y, energy, manifest)."""
    path = Path(path)
    try:
        with open(path / "manifest.json") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise DatasetError(f"cannot read manifest at {path}: {exc}") from exc
    n = int(manifest["n_points"])
    count = int(manifest["count"])
    if count < 1:
        raise DatasetError(f"{path}: dataset is empty")
    raw = np.fromfile(path / "pairs.bin", dtype="<f4")
    per = 6 * n + 1
    if raw.size != count * per:
        raise DatasetError(
            f"{path}: pairs.bin has {raw.size} floats, manifest expects {count * per}"
        )
    raw = raw.reshape(count, per)
    cplx = raw[:, : 6 * n].copy().view(np.complex64)
    x1 = cplx[:, :n]
    x2 = cplx[:, n : 2 * n]
    y = cplx[:, 2 * n : 3 * n]
    energy = raw[:, -1].astype(np.float64)
    return x1, x2, y, energy, manifest


def split_by_record_index(count: int, val_fraction: float):
    """Deterministic train/validation split: the tail records validate."""
    n_val = max(1, int(round(count * val_fraction)))
    if n_val >= count:
        raise DatasetError("dataset too small to hold out a validation split")
    train_idx = np.arange(count - n_val)
    val_idx = np.arange(count - n_val, count)
    return train_idx, val_idx


# ---------------------------------------------------------------------------
# WMK volumes (format contract mirrored from the core toolkit)


class WmkError(IOError):
    pass


def read_wmk(path):
    """Read a WMK directory -> (data (nx,ny,nz,n), header dict, masks dict)."""
    path = Path(path)
    try:
        with open(path / "header.json") as fh:
            header = json.load(fh)
    except OSError as exc:
        raise WmkError(f"cannot read WMK header at {path}: {exc}") from exc
    if header.get("format") != "WMK":
        raise WmkError(f"{path}: not a WMK volume")
    nx, ny, nz = header["dims"]
    nt = header["n_points"]
    raw = np.fromfile(path / "data.bin", dtype="<f4")
    if header["dtype"] == "complex64":
        if raw.size != nx * ny * nz * nt * 2:
            raise WmkError(f"{path}: data.bin size mismatch")
        arr = raw.view(np.complex64).reshape(nz, ny, nx, nt)
    else:
        if raw.size != nx * ny * nz * nt:
            raise WmkError(f"{path}: data.bin size mismatch")
        arr = raw.reshape(nz, ny, nx, nt)
    data = np.ascontiguousarray(arr.transpose(2, 1, 0, 3))
    masks = {}
    for name in header.get("masks", []):
        m = np.fromfile(path / f"{name}.bin", dtype=np.uint8)
        if m.size != nx * ny * nz:
            raise WmkError(f"{path}: mask {name} has wrong size")
        masks[name] = np.ascontiguousarray(
            m.reshape(nz, ny, nx).transpose(2, 1, 0).astype(bool))
    return data, header, masks


def write_wmk(path, data, voxel_mm, acquisition=None, masks=None, extra=None):
    """Write a 4-D array as a WMK directory (same contract as the core)."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 4:
        raise WmkError(f"{path}: expected 4-D data, got shape {data.shape}")
    path.mkdir(parents=True, exist_ok=True)
    complex_data = np.iscomplexobj(data)
    header = {
        "format": "WMK",
        "version": 1,
        "dims": list(data.shape[:3]),
        "n_points": int(data.shape[3]),
        "voxel_mm": [float(v) for v in voxel_mm],
        "dtype": "complex64" if complex_data else "float32",
        "axis_order": "x-fastest",
        "masks": sorted(masks) if masks else [],
    }
    if acquisition:
        header["acquisition"] = acquisition
    if extra:
        header["extra"] = extra
    raw = np.ascontiguousarray(data.transpose(2, 1, 0, 3))
    if complex_data:
        flat = raw.astype(np.complex64).view(np.float32)
    else:
        flat = raw.astype(np.float32)
    with open(path / "data.bin", "wb") as fh:
        flat.astype("<f4", copy=False).tofile(fh)
    if masks:
        for name, mask in masks.items():
            m = np.ascontiguousarray(np.asarray(mask, dtype=np.uint8).transpose(2, 1, 0))
            with open(path / f"{name}.bin", "wb") as fh:
                m.tofile(fh)
    with open(path / "header.json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
