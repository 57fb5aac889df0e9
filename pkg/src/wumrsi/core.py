"""Core signal types, Fourier conventions and Hankel construction.

Frequency/ppm convention (fixed here, used everywhere):

* time samples are ``t_n = n / bandwidth_hz`` for ``n = 0 .. n_points-1``;
* the spectrum is the unitary DFT of the FID, fftshifted so the frequency
  axis runs ascending from ``-bw/2`` to ``+bw/2`` Hz;
* ``ppm(k) = ref_ppm + f_k / larmor_mhz`` with ``f_k`` the centered offset
  in Hz, i.e. *higher ppm corresponds to higher frequency offset from the
  carrier*.  A positive complex exponential ``exp(+i 2 pi f t)`` therefore
  appears above ``ref_ppm``.

The unitary normalization makes Parseval hold exactly, so energies can be
computed in either domain.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import hankel as _hankel


class AxisMismatchError(ValueError):
    """Two spectra/volumes do not share the same axis or shape."""


GYROMAGNETIC_MHZ_PER_T = 42.577  # 1H gyromagnetic ratio / 2pi


@dataclass(frozen=True)
class AcquisitionParams:
    """Acquisition metadata shared by FIDs, spectra and volumes.

    Defaults follow the 7 T ultra-short-echo protocol: 2280 Hz spectral
    bandwidth, TE 0.9 ms, 451 time points, carrier at 4.7 ppm.
    """

    bandwidth_hz: float = 2280.0
    n_points: int = 451
    te_ms: float = 0.9
    field_tesla: float = 7.0
    larmor_mhz: float = 297.2
    ref_ppm: float = 4.7

    def __post_init__(self):
        if self.bandwidth_hz <= 0:
            raise ValueError(f"bandwidth_hz must be positive, got {self.bandwidth_hz}")
        if self.n_points < 2:
            raise ValueError(f"n_points must be >= 2, got {self.n_points}")
        if self.larmor_mhz <= 0:
            raise ValueError(f"larmor_mhz must be positive, got {self.larmor_mhz}")

    @property
    def dwell_s(self) -> float:
        return 1.0 / self.bandwidth_hz

    @property
    def dwell_ms(self) -> float:
        return 1e3 / self.bandwidth_hz

    def time_axis_s(self) -> np.ndarray:
        return np.arange(self.n_points) / self.bandwidth_hz

    def freq_axis_hz(self) -> np.ndarray:
        """Centered frequency offsets (Hz), ascending, matching fftshift order."""
        return np.fft.fftshift(np.fft.fftfreq(self.n_points, d=self.dwell_s))

    def ppm_axis(self) -> np.ndarray:
        return self.ref_ppm + self.freq_axis_hz() / self.larmor_mhz

    def hz_offset(self, ppm: float) -> float:
        """Frequency offset from the carrier for a chemical shift in ppm."""
        return (ppm - self.ref_ppm) * self.larmor_mhz


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Fid:
    """Complex time-domain signal plus acquisition metadata."""

    samples: np.ndarray
    params: AcquisitionParams

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.complex128)
        if samples.shape != (self.params.n_points,):
            raise ValueError(
                f"FID length {samples.shape} does not match n_points {self.params.n_points}"
            )
        if not np.all(np.isfinite(samples)):
            raise ValueError("FID contains non-finite samples")
        object.__setattr__(self, "samples", _readonly(samples))

    def energy(self) -> float:
        return float(np.sum(np.abs(self.samples) ** 2))


@dataclass(frozen=True)
class Spectrum:
    """Complex frequency-domain signal on an explicit ppm axis."""

    bins: np.ndarray
    ppm_axis: np.ndarray
    params: AcquisitionParams

    def __post_init__(self):
        bins = np.ascontiguousarray(self.bins, dtype=np.complex128)
        ppm = np.ascontiguousarray(self.ppm_axis, dtype=np.float64)
        if bins.ndim != 1 or bins.shape != ppm.shape:
            raise ValueError("bins and ppm_axis must be 1-D with equal length")
        if bins.shape != (self.params.n_points,):
            raise ValueError("spectrum length does not match params.n_points")
        d = np.diff(ppm)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("ppm_axis must be strictly monotone")
        object.__setattr__(self, "bins", _readonly(bins))
        object.__setattr__(self, "ppm_axis", _readonly(ppm))

    def energy(self) -> float:
        return float(np.sum(np.abs(self.bins) ** 2))

    def same_axis(self, other: "Spectrum", tol: float = 1e-9) -> bool:
        return self.bins.shape == other.bins.shape and np.allclose(
            self.ppm_axis, other.ppm_axis, atol=tol
        )

    def require_same_axis(self, other: "Spectrum"):
        if not self.same_axis(other):
            raise AxisMismatchError("spectra do not share the same ppm axis")


@dataclass(frozen=True)
class SpectralVolume:
    """3-D grid of FIDs with voxel geometry and brain/skull masks.

    ``fids`` is stored as a complex array of shape ``(nx, ny, nz, n_points)``
    sharing one :class:`AcquisitionParams`.
    """

    dims: tuple
    voxel_mm: tuple
    fids: np.ndarray
    params: AcquisitionParams
    brain_mask: np.ndarray
    skull_mask: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        fids = np.ascontiguousarray(self.fids, dtype=np.complex128)
        brain = np.ascontiguousarray(self.brain_mask, dtype=bool)
        skull = np.ascontiguousarray(self.skull_mask, dtype=bool)
        if fids.shape != dims + (self.params.n_points,):
            raise ValueError(
                f"fids shape {fids.shape} does not match dims {dims} x {self.params.n_points}"
            )
        if brain.shape != dims or skull.shape != dims:
            raise ValueError("mask dims must equal grid dims")
        if np.any(brain & skull):
            raise ValueError("brain and skull masks must be disjoint")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_mm", tuple(float(v) for v in self.voxel_mm))
        object.__setattr__(self, "fids", _readonly(fids))
        object.__setattr__(self, "brain_mask", _readonly(brain))
        object.__setattr__(self, "skull_mask", _readonly(skull))

    def fid_at(self, ix: int, iy: int, iz: int) -> Fid:
        return Fid(self.fids[ix, iy, iz].copy(), self.params)

    def with_fids(self, fids: np.ndarray) -> "SpectralVolume":
        return replace(self, fids=fids)


# ---------------------------------------------------------------------------
# transforms


def fid_to_spectrum(fid: Fid) -> Spectrum:
    """Unitary, fftshifted DFT of an FID.

    Parseval holds: sum |samples|^2 == sum |bins|^2.
    """
    n = fid.params.n_points
    bins = np.fft.fftshift(np.fft.fft(fid.samples)) / np.sqrt(n)
    return Spectrum(bins, fid.params.ppm_axis(), fid.params)


def spectrum_to_fid(spec: Spectrum) -> Fid:
    """Exact inverse of :func:`fid_to_spectrum`."""
    n = spec.params.n_points
    samples = np.fft.ifft(np.fft.ifftshift(spec.bins)) * np.sqrt(n)
    return Fid(samples, spec.params)


def fids_to_bins(samples: np.ndarray) -> np.ndarray:
    """Vectorized unitary transform along the last axis (no type wrapping)."""
    n = samples.shape[-1]
    return np.fft.fftshift(np.fft.fft(samples, axis=-1), axes=-1) / np.sqrt(n)


def bins_to_fids(bins: np.ndarray) -> np.ndarray:
    n = bins.shape[-1]
    return np.fft.ifft(np.fft.ifftshift(bins, axes=-1), axis=-1) * np.sqrt(n)


# ---------------------------------------------------------------------------
# Hankel


def build_hankel(fid: Fid, rows: int) -> np.ndarray:
    """Hankel matrix H[i, j] = samples[i + j] of shape rows x (n - rows + 1)."""
    n = fid.params.n_points
    if not 1 < rows < n:
        raise ValueError(f"rows must satisfy 1 < rows < n_points, got {rows} for n={n}")
    return _hankel(fid.samples[:rows], fid.samples[rows - 1 :])


# ---------------------------------------------------------------------------
# ppm bands


def ppm_band_indices(spec: Spectrum, center_ppm: float, half_width_ppm: float) -> np.ndarray:
    """Indices of bins inside [center - hw, center + hw] on the spectrum axis.

    The returned index set is contiguous.  A zero half-width selects the
    single nearest bin.  A band entirely outside the axis is an error.
    """
    if half_width_ppm < 0:
        raise ValueError("half_width_ppm must be non-negative")
    ppm = spec.ppm_axis
    lo, hi = center_ppm - half_width_ppm, center_ppm + half_width_ppm
    if hi < ppm.min() or lo > ppm.max():
        raise ValueError(
            f"band [{lo:.3f}, {hi:.3f}] ppm does not intersect axis "
            f"[{ppm.min():.3f}, {ppm.max():.3f}] ppm"
        )
    if half_width_ppm == 0:
        return np.array([int(np.argmin(np.abs(ppm - center_ppm)))])
    idx = np.nonzero((ppm >= lo) & (ppm <= hi))[0]
    if idx.size == 0:
        # band straddles the axis between two bins: fall back to the nearest
        return np.array([int(np.argmin(np.abs(ppm - center_ppm)))])
    return idx


# ---------------------------------------------------------------------------
# volume helpers


def volume_spectra(vol: SpectralVolume) -> np.ndarray:
    """All voxel spectra as an (nx, ny, nz, n_points) complex array."""
    return fids_to_bins(vol.fids)


def spectrum_at(vol: SpectralVolume, ix: int, iy: int, iz: int) -> Spectrum:
    return fid_to_spectrum(vol.fid_at(ix, iy, iz))
