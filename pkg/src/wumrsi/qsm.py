"""Quantitative susceptibility mapping from multi-echo volumes.

Pipeline: RSS magnitude -> quality-guided phase unwrapping -> mask
refinement -> T2*-weighted echo combination -> V-SHARP background removal
-> nonlinear dipole inversion (gradient descent on a phase-consistency
objective with L2 regularization).
"""

from __future__ import annotations

import heapq
import logging
import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import GYROMAGNETIC_MHZ_PER_T, SpectralVolume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EchoVolume:
    """Multi-echo magnitude/phase stack: (x, y, z, echo) grids."""

    magnitude: np.ndarray
    phase: np.ndarray
    te_ms: tuple
    voxel_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        mag = np.ascontiguousarray(self.magnitude, dtype=np.float64)
        ph = np.ascontiguousarray(self.phase, dtype=np.float64)
        te = tuple(float(t) for t in self.te_ms)
        if mag.ndim != 4 or mag.shape != ph.shape:
            raise ValueError("magnitude and phase must be matching 4-D grids")
        if mag.shape[3] != len(te):
            raise ValueError("echo count does not match te_ms")
        if len(te) > 1 and not np.all(np.diff(te) > 0):
            raise ValueError("te_ms must be strictly increasing")
        if np.any(ph < -np.pi - 1e-9) or np.any(ph > np.pi + 1e-9):
            raise ValueError("phase must lie in [-pi, pi] before unwrapping")
        object.__setattr__(self, "magnitude", mag)
        object.__setattr__(self, "phase", ph)
        object.__setattr__(self, "te_ms", te)
        object.__setattr__(self, "voxel_mm", tuple(float(v) for v in self.voxel_mm))

    @property
    def dims(self):
        return self.magnitude.shape[:3]

    @property
    def n_echoes(self) -> int:
        return self.magnitude.shape[3]


@dataclass(frozen=True)
class FieldMap:
    """Scalar field (Hz) with a validity mask."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        m = np.ascontiguousarray(self.mask, dtype=bool)
        if v.shape != m.shape or v.ndim != 3:
            raise ValueError("values and mask must be matching 3-D grids")
        if not np.all(np.isfinite(v[m])):
            raise ValueError("field contains non-finite values inside the mask")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)


@dataclass(frozen=True)
class SusceptibilityMap:
    """Susceptibility (ppm) with mask; zero outside the mask."""

    chi: np.ndarray
    mask: np.ndarray
    objective_trace: tuple = ()

    def __post_init__(self):
        chi = np.ascontiguousarray(self.chi, dtype=np.float64)
        m = np.ascontiguousarray(self.mask, dtype=bool)
        if chi.shape != m.shape or chi.ndim != 3:
            raise ValueError("chi and mask must be matching 3-D grids")
        if not np.all(np.isfinite(chi[m])):
            raise ValueError("chi contains non-finite values inside the mask")
        chi = np.where(m, chi, 0.0)
        object.__setattr__(self, "chi", chi)
        object.__setattr__(self, "mask", m)


# ---------------------------------------------------------------------------
# echo extraction


def fid_volume_to_echoes(vol: SpectralVolume, n_echoes: int) -> EchoVolume:
    """First n_echoes FID samples as a gradient-echo-like stack.

    Echo e images the complex FID sample e at TE = te_ms + e * dwell.
    """
    if n_echoes < 1 or n_echoes > vol.params.n_points:
        raise ValueError(f"n_echoes must lie in [1, {vol.params.n_points}]")
    data = vol.fids[..., :n_echoes]
    te = vol.params.te_ms + np.arange(n_echoes) * vol.params.dwell_ms
    return EchoVolume(
        magnitude=np.abs(data),
        phase=np.angle(data),
        te_ms=tuple(te.tolist()),
        voxel_mm=vol.voxel_mm,
    )


def rss_magnitude(ev: EchoVolume) -> np.ndarray:
    """Root-sum-of-squares magnitude across echoes."""
    return np.sqrt(np.sum(ev.magnitude**2, axis=3))


# ---------------------------------------------------------------------------
# unwrapping


def _wrap(a: np.ndarray) -> np.ndarray:
    return np.angle(np.exp(1j * a))


def phase_quality(phase: np.ndarray) -> np.ndarray:
    """Per-voxel phase coherence in [0, 1] from second differences.

    For each echo and axis the wrapped second difference d2 gives a score
    (1 + cos d2)/2; the per-echo scores multiply across the three axes and
    average across echoes.  Smooth (even steeply ramped) phase scores near
    1; noise voxels score low.
    """
    q_echo = np.ones(phase.shape, dtype=float)
    for axis in range(3):
        fwd = np.roll(phase, -1, axis=axis)
        bwd = np.roll(phase, 1, axis=axis)
        d2 = _wrap(fwd - 2 * phase + bwd)
        # replicate edges instead of wrapping around the grid
        sl = [slice(None)] * phase.ndim
        sl[axis] = 0
        inner = [slice(None)] * phase.ndim
        inner[axis] = 1
        d2[tuple(sl)] = d2[tuple(inner)]
        sl[axis] = -1
        inner[axis] = -2
        d2[tuple(sl)] = d2[tuple(inner)]
        q_echo = q_echo * (1 + np.cos(d2)) / 2
    return np.mean(q_echo, axis=3)


_NEIGHBOR_OFFSETS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


def _unwrap_3d(wrapped: np.ndarray, quality: np.ndarray, mask: np.ndarray) -> tuple:
    """Quality-guided region growing unwrap of one 3-D phase volume.

    Disconnected mask regions are unwrapped independently; returns
    (unwrapped, n_regions).
    """
    dims = wrapped.shape
    unwrapped = wrapped.copy()
    visited = ~mask.copy()
    n_regions = 0
    counter = 0
    todo = int(np.count_nonzero(mask))
    while todo > 0:
        seeds = np.argwhere(~visited)
        if seeds.size == 0:
            break
        qv = quality[~visited]
        seed = tuple(seeds[int(np.argmax(qv))])
        n_regions += 1
        visited[seed] = True
        todo -= 1
        heap = []
        for d in _NEIGHBOR_OFFSETS:
            nb = (seed[0] + d[0], seed[1] + d[1], seed[2] + d[2])
            if all(0 <= nb[i] < dims[i] for i in range(3)) and not visited[nb]:
                counter += 1
                heapq.heappush(heap, (-quality[nb], counter, nb, seed))
        while heap:
            _, _, vox, ref = heapq.heappop(heap)
            if visited[vox]:
                continue
            visited[vox] = True
            todo -= 1
            k = np.round((unwrapped[ref] - wrapped[vox]) / (2 * np.pi))
            unwrapped[vox] = wrapped[vox] + 2 * np.pi * k
            for d in _NEIGHBOR_OFFSETS:
                nb = (vox[0] + d[0], vox[1] + d[1], vox[2] + d[2])
                if all(0 <= nb[i] < dims[i] for i in range(3)) and not visited[nb]:
                    counter += 1
                    heapq.heappush(heap, (-quality[nb], counter, nb, vox))
    return unwrapped, n_regions


def unwrap_phase(ev: EchoVolume, mask: np.ndarray | None = None):
    """Per-echo 3-D quality-guided unwrapping.

    Returns (unwrapped 4-D grid, quality 3-D grid in [0, 1]).  The unwrapped
    phase stays congruent with the input modulo 2 pi.
    """
    if mask is None:
        mask = np.ones(ev.dims, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask):
        raise ValueError("mask is empty")
    quality = phase_quality(ev.phase)
    unwrapped = np.empty_like(ev.phase)
    for e in range(ev.n_echoes):
        unwrapped[..., e], n_regions = _unwrap_3d(ev.phase[..., e], quality, mask)
        if n_regions > 1:
            log.warning("echo %d: %d disconnected mask regions unwrapped independently",
                        e, n_regions)
    unwrapped[~mask] = ev.phase[~mask]
    return unwrapped, quality


def _ball(radius_voxels: int) -> np.ndarray:
    r = int(radius_voxels)
    g = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
    return (g[0] ** 2 + g[1] ** 2 + g[2] ** 2) <= r**2


def refine_mask(mask: np.ndarray, quality: np.ndarray, threshold: float = 0.3):
    """Quality-threshold the mask, close interior holes, record the holes.

    Returns (refined, holes): refined is mask AND quality >= threshold with
    holes filled by morphological closing (ball radius 2); holes marks the
    re-introduced voxels so later stages can exclude them.
    """
    mask = np.asarray(mask, dtype=bool)
    thresholded = mask & (quality >= threshold)
    closed = ndimage.binary_closing(thresholded, structure=_ball(2)) & mask
    refined = closed | thresholded
    holes = refined & ~thresholded
    return refined, holes


# ---------------------------------------------------------------------------
# echo combination


def combine_echoes(
    unwrapped: np.ndarray,
    magnitude: np.ndarray,
    te_ms,
    t2star_ms: float = 25.0,
    mask: np.ndarray | None = None,
) -> FieldMap:
    """Weighted least-squares phase-vs-TE slope per voxel, in Hz.

    Weights TE * exp(-TE / T2*) (the SNR-optimal slope weighting for a
    monoexponential decay with the stated constant tissue T2*).
    """
    te = np.asarray(te_ms, dtype=float)
    if te.size < 2:
        raise ValueError("echo combination needs at least 2 echoes")
    if mask is None:
        mask = np.ones(unwrapped.shape[:3], dtype=bool)
    w = te * np.exp(-te / t2star_ms)
    te_s = te * 1e-3
    t_bar = np.sum(w * te_s) / np.sum(w)
    denom = np.sum(w * (te_s - t_bar) ** 2)
    # weighted slope with intercept: sum w (t - tbar) phi / sum w (t - tbar)^2
    slope = np.tensordot(unwrapped, w * (te_s - t_bar), axes=([3], [0])) / denom
    field = slope / (2 * np.pi)
    field = np.where(mask, field, 0.0)
    return FieldMap(values=field, mask=mask)


def combination_te_eff_ms(te_ms, t2star_ms: float = 25.0) -> float:
    """Weighted-mean TE of the echo combination (used as NDI phase scale)."""
    te = np.asarray(te_ms, dtype=float)
    w = te * np.exp(-te / t2star_ms)
    return float(np.sum(w * te) / np.sum(w))


# ---------------------------------------------------------------------------
# V-SHARP


def _smv_kernel_ft(dims, voxel_mm, radius_mm: float) -> np.ndarray:
    """FFT of a normalized spherical-mean kernel centered at the origin."""
    nx, ny, nz = dims
    x = (np.arange(nx) - nx // 2) * voxel_mm[0]
    y = (np.arange(ny) - ny // 2) * voxel_mm[1]
    z = (np.arange(nz) - nz // 2) * voxel_mm[2]
    gx, gy, gz = np.meshgrid(x, y, z, indexing="ij")
    ball = (gx**2 + gy**2 + gz**2) <= radius_mm**2
    kern = ball.astype(float)
    kern /= kern.sum()
    kern = np.fft.ifftshift(kern)
    return np.fft.fftn(kern)


def vsharp(
    field: FieldMap,
    voxel_mm=(1.0, 1.0, 1.0),
    radii_mm=None,
    tsvd: float = 0.05,
) -> FieldMap:
    """Variable-radius SMV background removal with TSVD deconvolution.

    Radii default to 12 mm down to one voxel in 1 mm steps (descending).
    The output mask is eroded to the feasibility region of the smallest
    radius.
    """
    mask = field.mask
    if not np.any(mask):
        raise ValueError("field mask is empty")
    dims = field.values.shape
    min_dim_mm = min(d * v for d, v in zip(dims, voxel_mm))
    if radii_mm is None:
        r_max = min(12.0, min_dim_mm / 3)
        radii_mm = np.arange(r_max, min(voxel_mm) - 1e-9, -1.0)
        radii_mm = [float(r) for r in radii_mm if r >= min(voxel_mm)]
        if not radii_mm:
            radii_mm = [float(min(voxel_mm))]
    radii = sorted(set(float(r) for r in radii_mm), reverse=True)
    if radii[0] * 2 >= min_dim_mm:
        raise ValueError("mask/volume smaller than the largest SMV kernel")

    f = np.where(mask, field.values, 0.0)
    fk = np.fft.fftn(f)
    mk = np.fft.fftn(mask.astype(float))
    highpass = np.zeros(dims)
    assigned = np.zeros(dims, dtype=bool)
    feasible_smallest = np.zeros(dims, dtype=bool)
    largest_kft = None
    for r in radii:
        kft = _smv_kernel_ft(dims, voxel_mm, r)
        if largest_kft is None:
            largest_kft = kft
        inside = np.real(np.fft.ifftn(mk * kft))
        feasible = mask & (inside >= 1.0 - 1e-6)
        smv = np.real(np.fft.ifftn(fk * kft))
        hp = f - smv
        sel = feasible & ~assigned
        highpass[sel] = hp[sel]
        assigned |= feasible
        feasible_smallest = feasible
    if not np.any(assigned):
        raise ValueError("no voxel is feasible for any SMV radius")
    # truncated deconvolution of (delta - SMV) at the largest radius, which
    # keeps the low-frequency response invertible
    one_minus = 1.0 - largest_kft
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(np.abs(one_minus) > tsvd, 1.0 / one_minus, 0.0)
    inv = np.nan_to_num(inv)
    local = np.real(np.fft.ifftn(np.fft.fftn(np.where(assigned, highpass, 0.0)) * inv))
    out_mask = assigned & feasible_smallest
    local = np.where(out_mask, local, 0.0)
    return FieldMap(values=local, mask=out_mask)


# ---------------------------------------------------------------------------
# dipole inversion


def dipole_kernel(dims, voxel_mm=(1.0, 1.0, 1.0), b0_dir=(0.0, 0.0, 1.0)) -> np.ndarray:
    """D(k) = 1/3 - (k . b0)^2 / |k|^2 in fftn (unshifted) ordering; D(0) = 0."""
    b0 = np.asarray(b0_dir, dtype=float)
    b0 = b0 / np.linalg.norm(b0)
    ks = [np.fft.fftfreq(n, d=v) for n, v in zip(dims, voxel_mm)]
    kx, ky, kz = np.meshgrid(*ks, indexing="ij")
    kdotb = kx * b0[0] + ky * b0[1] + kz * b0[2]
    k2 = kx**2 + ky**2 + kz**2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = 1.0 / 3.0 - kdotb**2 / k2
    d[k2 == 0] = 0.0
    return d


class NdiDivergence(RuntimeError):
    """NDI objective failed to decrease after the step-halving budget."""


def ndi_invert(
    field: FieldMap,
    magnitude: np.ndarray,
    te_eff_ms: float,
    b0_tesla: float = 7.0,
    iters: int = 500,
    lam: float = 1e-4,
    voxel_mm=(1.0, 1.0, 1.0),
    b0_dir=(0.0, 0.0, 1.0),
    step: float = 1.0,
    max_halvings: int = 40,
) -> SusceptibilityMap:
    """Nonlinear dipole inversion by gradient descent.

    Minimizes ||W (exp(i D chi') - exp(i phi))||^2 + lam ||chi'||^2 in the
    phase-scaled variable chi' and converts to ppm at the end.  Sources are
    constrained to the mask support (the min-norm unconstrained solution
    spreads susceptibility outside the mask and underestimates badly).
    Heavy-ball momentum accelerates the slow near-cone modes; any step that
    would increase the objective falls back to plain gradient descent with
    halving, so the recorded objective never increases.  Raises
    :class:`NdiDivergence` if no decrease is found within the halving
    budget.
    """
    mask = field.mask
    dims = field.values.shape
    w = np.asarray(magnitude, dtype=float)
    if w.shape != dims:
        raise ValueError("magnitude shape does not match the field")
    wmax = w[mask].max() if np.any(mask) else 1.0
    if wmax <= 0:
        raise ValueError("magnitude is non-positive inside the mask")
    w = np.where(mask, w / wmax, 0.0)
    w2 = w**2
    scale = 2 * np.pi * (te_eff_ms * 1e-3) * GYROMAGNETIC_MHZ_PER_T * b0_tesla  # rad per ppm
    phi = 2 * np.pi * np.where(mask, field.values, 0.0) * (te_eff_ms * 1e-3)
    d = dipole_kernel(dims, voxel_mm, b0_dir)

    chi = np.zeros(dims)
    support = mask.astype(float)

    def objective_and_grad(c):
        psi = np.real(np.fft.ifftn(d * np.fft.fftn(c)))
        # |e^{i psi} - e^{i phi}|^2 = 2 (1 - cos(psi - phi))
        diff = psi - phi
        obj = float(np.sum(w2 * 2 * (1 - np.cos(diff))) + lam * np.sum(c**2))
        g_psi = 2 * w2 * np.sin(diff)
        grad = (np.real(np.fft.ifftn(d * np.fft.fftn(g_psi))) + 2 * lam * c) * support
        return obj, grad

    obj, grad = objective_and_grad(chi)
    prev = chi
    momentum = 0.92
    trace = [obj]
    for it in range(iters):
        cand = chi - step * grad + momentum * (chi - prev)
        cand_obj, cand_grad = objective_and_grad(cand)
        if cand_obj > obj:
            alpha = step
            tried = 0
            while True:
                cand = chi - alpha * grad
                cand_obj, cand_grad = objective_and_grad(cand)
                if cand_obj <= obj or obj == 0.0:
                    break
                alpha *= 0.5
                tried += 1
                if tried > max_halvings:
                    raise NdiDivergence(
                        f"objective would not decrease at iteration {it} "
                        f"(step exhausted after {max_halvings} halvings)"
                    )
        prev, chi, obj, grad = chi, cand, cand_obj, cand_grad
        trace.append(obj)
        if np.linalg.norm(grad) < 1e-12:
            break
    chi_ppm = chi / scale
    return SusceptibilityMap(
        chi=np.where(mask, chi_ppm, 0.0), mask=mask, objective_trace=tuple(trace)
    )


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class QsmStages:
    rss: np.ndarray = None
    quality: np.ndarray = None
    unwrapped: np.ndarray = None
    refined_mask: np.ndarray = None
    holes: np.ndarray = None
    field: FieldMap = None
    local_field: FieldMap = None
    final_mask: np.ndarray = None
    chi: SusceptibilityMap = None
    notes: dict = dataclasses.field(default_factory=dict)


def qsm_pipeline(
    ev: EchoVolume,
    mask: np.ndarray,
    b0_tesla: float = 7.0,
    t2star_ms: float = 25.0,
    quality_threshold: float = 0.3,
    radii_mm=None,
    iters: int = 500,
    lam: float = 1e-4,
    b0_dir=(0.0, 0.0, 1.0),
) -> QsmStages:
    """Full QSM reconstruction; every intermediate is kept for inspection."""
    stages = QsmStages()
    mask = np.asarray(mask, dtype=bool)

    def run(stage, fn, *a, **k):
        try:
            return fn(*a, **k)
        except Exception as exc:
            raise RuntimeError(f"QSM stage '{stage}' failed: {exc}") from exc

    stages.rss = run("rss", rss_magnitude, ev)
    stages.unwrapped, stages.quality = run("unwrap", unwrap_phase, ev, mask)
    if not np.any(mask):
        raise RuntimeError("QSM stage 'refine_mask' failed: mask is empty")
    stages.refined_mask, stages.holes = run(
        "refine_mask", refine_mask, mask, stages.quality, quality_threshold
    )
    stages.field = run(
        "combine_echoes", combine_echoes, stages.unwrapped, ev.magnitude, ev.te_ms,
        t2star_ms, stages.refined_mask,
    )
    stages.local_field = run("vsharp", vsharp, stages.field, ev.voxel_mm, radii_mm)
    # final mask: V-SHARP feasibility minus the re-introduced quality holes
    stages.final_mask = stages.local_field.mask & ~stages.holes
    local = FieldMap(
        values=np.where(stages.final_mask, stages.local_field.values, 0.0),
        mask=stages.final_mask,
    )
    te_eff = combination_te_eff_ms(ev.te_ms, t2star_ms)
    stages.chi = run(
        "ndi", ndi_invert, local, stages.rss, te_eff, b0_tesla,
        iters, lam, ev.voxel_mm, b0_dir,
    )
    stages.notes = {"te_eff_ms": te_eff, "n_echoes": ev.n_echoes}
    return stages
