"""WMK container format.

A WMK volume is a directory holding

* ``header.json`` -- dims, voxel size, acquisition metadata, dtype and the
  axis order (``x-fastest``);
* ``data.bin`` -- little-endian 32-bit floats; complex data is interleaved
  real/imag.  Layout is voxel-major then time: for each voxel (x fastest,
  then y, then z) its ``n_points`` samples are contiguous.

Optional ``brain_mask.bin`` / ``skull_mask.bin`` files hold uint8 masks in
the same spatial order; their presence is recorded in the header.

This is the only on-disk volume format used by the toolkit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import AcquisitionParams, SpectralVolume

_FORMAT = "WMK"
_VERSION = 1


class WmkError(IOError):
    """WMK container could not be read or written."""


@dataclass
class WmkVolume:
    """In-memory view of a WMK directory.

    ``data`` has shape (nx, ny, nz, n_points); complex64-backed volumes are
    promoted to complex128, float volumes to float64.
    """

    data: np.ndarray
    voxel_mm: tuple
    params: AcquisitionParams | None = None
    masks: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple:
        return self.data.shape[:3]

    @property
    def n_points(self) -> int:
        return self.data.shape[3]

    def to_spectral_volume(self) -> SpectralVolume:
        if self.params is None:
            raise WmkError("volume has no acquisition metadata; cannot build SpectralVolume")
        if not np.iscomplexobj(self.data):
            raise WmkError("volume is real-valued; cannot build SpectralVolume")
        nx, ny, nz = self.dims
        brain = self.masks.get("brain_mask", np.ones(self.dims, dtype=bool))
        skull = self.masks.get("skull_mask", np.zeros(self.dims, dtype=bool))
        return SpectralVolume(
            dims=(nx, ny, nz),
            voxel_mm=self.voxel_mm,
            fids=self.data,
            params=self.params,
            brain_mask=brain,
            skull_mask=skull,
        )


def _disk_order(a: np.ndarray) -> np.ndarray:
    # (nx, ny, nz, nt) -> bytes with x fastest among voxels, time fastest overall
    return np.ascontiguousarray(a.transpose(2, 1, 0, 3))


def _from_disk_order(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(2, 1, 0, 3))


def write_wmk(
    path,
    data: np.ndarray,
    voxel_mm=(1.0, 1.0, 1.0),
    params: AcquisitionParams | None = None,
    masks: dict | None = None,
    extra: dict | None = None,
) -> Path:
    """Write a 4-D (nx, ny, nz, n) array as a WMK directory."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[..., None]
    if data.ndim != 4:
        raise WmkError(f"{path}: expected 3-D or 4-D data, got shape {data.shape}")
    try:
        path.mkdir(parents=True, exist_ok=True)
        complex_data = np.iscomplexobj(data)
        header = {
            "format": _FORMAT,
            "version": _VERSION,
            "dims": list(data.shape[:3]),
            "n_points": int(data.shape[3]),
            "voxel_mm": [float(v) for v in voxel_mm],
            "dtype": "complex64" if complex_data else "float32",
            "axis_order": "x-fastest",
            "masks": sorted(masks) if masks else [],
        }
        if params is not None:
            header["acquisition"] = {
                "bandwidth_hz": params.bandwidth_hz,
                "n_points": params.n_points,
                "te_ms": params.te_ms,
                "field_tesla": params.field_tesla,
                "larmor_mhz": params.larmor_mhz,
                "ref_ppm": params.ref_ppm,
            }
        if extra:
            header["extra"] = extra
        raw = _disk_order(data)
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
    except OSError as exc:
        raise WmkError(f"failed to write WMK volume at {path}: {exc}") from exc
    return path


def read_wmk(path) -> WmkVolume:
    path = Path(path)
    try:
        with open(path / "header.json") as fh:
            header = json.load(fh)
    except OSError as exc:
        raise WmkError(f"failed to read WMK header at {path}: {exc}") from exc
    if header.get("format") != _FORMAT:
        raise WmkError(f"{path}: not a WMK volume")
    nx, ny, nz = header["dims"]
    nt = header["n_points"]
    dtype = header["dtype"]
    try:
        raw = np.fromfile(path / "data.bin", dtype="<f4")
    except OSError as exc:
        raise WmkError(f"failed to read WMK data at {path}: {exc}") from exc
    if dtype == "complex64":
        expected = nx * ny * nz * nt * 2
        if raw.size != expected:
            raise WmkError(f"{path}: data.bin has {raw.size} floats, expected {expected}")
        arr = raw.view(np.complex64).reshape(nz, ny, nx, nt).astype(np.complex128)
    else:
        expected = nx * ny * nz * nt
        if raw.size != expected:
            raise WmkError(f"{path}: data.bin has {raw.size} floats, expected {expected}")
        arr = raw.reshape(nz, ny, nx, nt).astype(np.float64)
    data = _from_disk_order(arr)
    params = None
    if "acquisition" in header:
        acq = header["acquisition"]
        params = AcquisitionParams(
            bandwidth_hz=acq["bandwidth_hz"],
            n_points=acq["n_points"],
            te_ms=acq["te_ms"],
            field_tesla=acq["field_tesla"],
            larmor_mhz=acq["larmor_mhz"],
            ref_ppm=acq["ref_ppm"],
        )
    masks = {}
    for name in header.get("masks", []):
        m = np.fromfile(path / f"{name}.bin", dtype=np.uint8)
        if m.size != nx * ny * nz:
            raise WmkError(f"{path}: mask {name} has wrong size")
        masks[name] = np.ascontiguousarray(m.reshape(nz, ny, nx).transpose(2, 1, 0).astype(bool))
    return WmkVolume(
        data=data,
        voxel_mm=tuple(header["voxel_mm"]),
        params=params,
        masks=masks,
        meta=header.get("extra", {}),
    )


def write_spectral_volume(path, vol: SpectralVolume, extra: dict | None = None) -> Path:
    return write_wmk(
        path,
        vol.fids,
        voxel_mm=vol.voxel_mm,
        params=vol.params,
        masks={"brain_mask": vol.brain_mask, "skull_mask": vol.skull_mask},
        extra=extra,
    )


def read_spectral_volume(path) -> SpectralVolume:
    return read_wmk(path).to_spectral_volume()
