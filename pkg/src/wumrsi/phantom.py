"""Synthetic water-unsuppressed MRSI phantoms.

Generates metabolite, water, gradient-vibration sideband and lipid signals
as sums of damped complex exponentials, the augmented/normalized training
pairs consumed by the file-coupled denoiser trainer, and small volume
phantoms for the volume-level pipelines.

Sideband synthesis note: gradient vibrations modulate B0, i.e. they phase-
modulate the water signal.  To first order a modulation
``a cos(2 pi f t)`` produces a mirrored pair of components at +/- f with a
90-degree phase relative to water.  The default generator therefore emits
mirrored pairs in quadrature with the water phase; the frequency, decay and
amplitude distributions are free parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import AcquisitionParams, Fid, Spectrum, SpectralVolume, fids_to_bins
from .nuisance import LipidOperator, apply_lipid_projection, build_lipid_operator

WATER_PPM = 4.7


class DegeneratePairError(RuntimeError):
    """The lipid-space energy E vanished; the pair must be resampled."""


@dataclass(frozen=True)
class Resonance:
    """One Lorentzian line: A e^{i phi} e^{(i 2 pi f - gamma) t}."""

    shift_ppm: float
    amplitude: float
    damping_hz: float
    phase_rad: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.damping_hz <= 0:
            raise ValueError("damping_hz must be positive")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")


@dataclass(frozen=True)
class SidebandComponent:
    """A water sideband at water +/- offset_hz, amplitude relative to water."""

    offset_hz: float
    amplitude_frac: float
    decay_hz: float
    phase_rad: float = np.pi / 2  # quadrature with water: phase modulation
    mirrored: bool = True

    def __post_init__(self):
        if not 0 <= self.amplitude_frac <= 0.02:
            raise ValueError("amplitude_frac must lie in [0, 0.02] at generation time")
        if self.decay_hz <= 0:
            raise ValueError("decay_hz must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    """Full description of one synthetic wu-MRSI spectrum."""

    metabolites: tuple = ()
    water_amp_factor: float = 0.0
    sidebands: tuple = ()
    lipids: tuple = ()
    noise_sigma: float = 0.0
    seed: int = 0
    water_damping_hz: float = 100.0
    water_phase_rad: float = 0.0

    def __post_init__(self):
        if not 0 <= self.water_amp_factor <= 1e4:
            raise ValueError("water_amp_factor must lie in [0, 1e4]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        object.__setattr__(self, "metabolites", tuple(self.metabolites))
        object.__setattr__(self, "sidebands", tuple(self.sidebands))
        object.__setattr__(self, "lipids", tuple(self.lipids))

    def water_amplitude(self) -> float:
        met_total = sum(r.amplitude for r in self.metabolites)
        return self.water_amp_factor * (met_total if met_total > 0 else 1.0)


# ---------------------------------------------------------------------------
# synthesis


def _lorentzian_fid(t: np.ndarray, amp: float, freq_hz: float, damping: float, phase: float):
    return amp * np.exp(1j * phase) * np.exp((2j * np.pi * freq_hz - damping) * t)


def _component_fids(spec: PhantomSpec, params: AcquisitionParams) -> dict:
    t = params.time_axis_s()
    zero = np.zeros(params.n_points, dtype=complex)
    water_amp = spec.water_amplitude()
    w = (
        _lorentzian_fid(t, water_amp, params.hz_offset(WATER_PPM), spec.water_damping_hz,
                        spec.water_phase_rad)
        if water_amp > 0
        else zero.copy()
    )
    m = zero.copy()
    for r in spec.metabolites:
        m += _lorentzian_fid(t, r.amplitude, params.hz_offset(r.shift_ppm), r.damping_hz,
                             r.phase_rad)
    s = zero.copy()
    f_water = params.hz_offset(WATER_PPM)
    for sb in spec.sidebands:
        amp = sb.amplitude_frac * water_amp
        phase = spec.water_phase_rad + sb.phase_rad
        s += _lorentzian_fid(t, amp, f_water + sb.offset_hz, sb.decay_hz, phase)
        if sb.mirrored:
            s += _lorentzian_fid(t, amp, f_water - sb.offset_hz, sb.decay_hz, phase)
    l = zero.copy()
    for r in spec.lipids:
        l += _lorentzian_fid(t, r.amplitude, params.hz_offset(r.shift_ppm), r.damping_hz,
                             r.phase_rad)
    return {"w": w, "s": s, "l": l, "m": m}


def simulate_fid(spec: PhantomSpec, params: AcquisitionParams = AcquisitionParams()):
    """Simulate one wu-MRSI FID.

    Returns (total, components) where components maps 'w', 's', 'l', 'm'
    (and 'noise' when noise_sigma > 0) to :class:`Fid`; the noise-free
    components sum to the total minus noise.
    """
    comps = _component_fids(spec, params)
    total = comps["w"] + comps["s"] + comps["l"] + comps["m"]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        noise = spec.noise_sigma * (
            rng.standard_normal(params.n_points) + 1j * rng.standard_normal(params.n_points)
        )
        comps["noise"] = noise
        total = total + noise
    out = {k: Fid(v, params) for k, v in comps.items()}
    return Fid(total, params), out


def default_metabolite_panel() -> list:
    """Deterministic literature panel of brain metabolite singlets.

    Chemical shifts are standard literature values (not read from any single
    acquisition): NAA 2.01, Glu 2.35, tCr 3.03/3.91, tCho 3.21, mI 3.55 and
    2HG 4.02 ppm.  Amplitudes are loosely proportional to healthy-brain
    concentrations in arbitrary units.
    """
    return [
        Resonance(2.01, 1.00, 12.0, name="NAA"),
        Resonance(2.35, 0.45, 16.0, name="Glu"),
        Resonance(3.03, 0.60, 12.0, name="tCr"),
        Resonance(3.91, 0.35, 14.0, name="tCr2"),
        Resonance(3.21, 0.30, 12.0, name="tCho"),
        Resonance(3.55, 0.40, 14.0, name="mI"),
        Resonance(4.02, 0.15, 16.0, name="2HG"),
    ]


LIPID_PPM = (0.9, 1.3, 2.0)


def default_lipid_resonances(rng: np.random.Generator, amplitude: float = 1.0) -> list:
    """Three broad lipid lines with randomized damping/phase."""
    out = []
    for ppm, rel in zip(LIPID_PPM, (0.6, 1.0, 0.4)):
        out.append(
            Resonance(
                ppm,
                amplitude * rel * rng.uniform(0.7, 1.3),
                rng.uniform(40.0, 100.0),
                rng.uniform(0, 2 * np.pi),
                name=f"lipid{ppm:g}",
            )
        )
    return out


def default_sideband_set(rng: np.random.Generator, n_min: int = 4, n_max: int = 8) -> list:
    """4-8 mirrored quadrature sideband pairs, offsets 200-900 Hz."""
    n = int(rng.integers(n_min, n_max + 1))
    return [
        SidebandComponent(
            offset_hz=rng.uniform(200.0, 900.0),
            amplitude_frac=rng.uniform(1e-4, 0.01),
            decay_hz=rng.uniform(20.0, 200.0),
            phase_rad=np.pi / 2,
            mirrored=True,
        )
        for _ in range(n)
    ]


# ---------------------------------------------------------------------------
# augmentation


def augment_sidebands(sidebands, rng: np.random.Generator) -> list:
    """Randomized sideband augmentation.

    Each component is frequency-shifted by up to +/- 60 Hz, mirrored about
    the water line with probability 0.5, rescaled to at most 1% of the water
    amplitude and given a fresh random phase.
    """
    sidebands = list(sidebands)
    if not sidebands:
        raise ValueError("sideband list is empty")
    out = []
    for sb in sidebands:
        offset = sb.offset_hz + rng.uniform(-60.0, 60.0)
        if rng.random() < 0.5:
            # mirror about 4.7 ppm (a no-op for already-mirrored pairs)
            offset = -offset
        amp = rng.uniform(0.0, 0.01)
        if amp == 0.0:
            amp = 0.005
        out.append(
            SidebandComponent(
                offset_hz=offset,
                amplitude_frac=amp,
                decay_hz=sb.decay_hz,
                phase_rad=rng.uniform(0, 2 * np.pi),
                mirrored=sb.mirrored,
            )
        )
    return out


def augment_pair(x1: Spectrum, y: Spectrum, rng: np.random.Generator):
    """Common random phase (uniform [0, 2pi)) and scale (uniform [0.5, 1.5])."""
    x1.require_same_axis(y)
    omega = rng.uniform(0, 2 * np.pi)
    scale = rng.uniform(0.5, 1.5)
    factor = scale * np.exp(1j * omega)
    return (
        Spectrum(x1.bins * factor, x1.ppm_axis, x1.params),
        Spectrum(y.bins * factor, y.ppm_axis, y.params),
    )


# ---------------------------------------------------------------------------
# training pairs


@dataclass(frozen=True)
class TrainingPair:
    """One normalized denoiser training record.

    x1, x2 and y_truth (and m_truth, kept for evaluation) are divided by
    E = ||x1 - x2||; ``energy`` stores E for denormalization.
    """

    x1: Spectrum
    x2: Spectrum
    y_truth: Spectrum
    m_truth: Spectrum
    energy: float

    def __post_init__(self):
        if self.energy <= 0:
            raise ValueError("energy must be positive")
        resid = self.x1.bins - (self.y_truth.bins + self.m_truth.bins)
        scale = max(float(np.linalg.norm(self.x1.bins)), 1e-300)
        if np.linalg.norm(resid) / scale > 1e-6:
            raise ValueError("x1 != y_truth + m_truth beyond tolerance")


def make_training_pair(
    spec: PhantomSpec,
    lipid_op: LipidOperator,
    params: AcquisitionParams = AcquisitionParams(),
    rng: np.random.Generator | None = None,
    augment: bool = False,
) -> TrainingPair:
    """Simulate, project, normalize: the full training-record recipe."""
    total, comps = simulate_fid(spec, params)
    bins_total = fids_to_bins(total.samples)
    nuis = comps["w"].samples + comps["s"].samples + comps["l"].samples
    if "noise" in comps:
        nuis = nuis + comps["noise"].samples
    y_bins = fids_to_bins(nuis)
    m_bins = fids_to_bins(comps["m"].samples)
    axis = params.ppm_axis()
    x1 = Spectrum(bins_total, axis, params)
    y = Spectrum(y_bins, axis, params)
    if augment:
        if rng is None:
            rng = np.random.default_rng(spec.seed)
        factor = rng.uniform(0.5, 1.5) * np.exp(1j * rng.uniform(0, 2 * np.pi))
        x1 = Spectrum(x1.bins * factor, axis, params)
        y = Spectrum(y.bins * factor, axis, params)
        m_bins = m_bins * factor
    x2 = apply_lipid_projection(x1, lipid_op)
    energy = float(np.linalg.norm(x1.bins - x2.bins))
    if energy <= 1e-12 * max(float(np.linalg.norm(x1.bins)), 1.0) or energy <= 1e-300:
        raise DegeneratePairError("no lipid-space content: E is numerically zero")
    return TrainingPair(
        x1=Spectrum(x1.bins / energy, axis, params),
        x2=Spectrum(x2.bins / energy, axis, params),
        y_truth=Spectrum(y.bins / energy, axis, params),
        m_truth=Spectrum(m_bins / energy, axis, params),
        energy=energy,
    )


# ---------------------------------------------------------------------------
# randomized phantom sampling


@dataclass(frozen=True)
class SamplerConfig:
    """Distributions for randomized phantom generation."""

    water_factor_min: float = 10.0
    water_factor_max: float = 1e4
    lipid_amp_rel: float = 50.0  # lipid leakage relative to total metabolite amplitude
    noise_sigma_rel: float = 2e-3  # relative to total metabolite amplitude
    met_amp_jitter: float = 0.3
    water_damping_range: tuple = (60.0, 160.0)


def sample_phantom_spec(
    rng: np.random.Generator,
    seed: int,
    cfg: SamplerConfig = SamplerConfig(),
    lipid_basis_mixture: bool = False,
) -> PhantomSpec:
    """Draw one randomized phantom: jittered panel, log-uniform water scale,
    quadrature sidebands, broad lipids and mild complex noise."""
    mets = []
    for r in default_metabolite_panel():
        amp = r.amplitude * rng.uniform(1 - cfg.met_amp_jitter, 1 + cfg.met_amp_jitter)
        mets.append(replace(r, amplitude=amp, damping_hz=r.damping_hz * rng.uniform(0.8, 1.3),
                            phase_rad=0.0))
    met_total = sum(r.amplitude for r in mets)
    water_factor = float(
        np.exp(rng.uniform(np.log(cfg.water_factor_min), np.log(cfg.water_factor_max)))
    )
    lipids = () if lipid_basis_mixture else tuple(
        default_lipid_resonances(rng, amplitude=cfg.lipid_amp_rel * met_total / 2.0)
    )
    return PhantomSpec(
        metabolites=tuple(mets),
        water_amp_factor=water_factor,
        sidebands=tuple(default_sideband_set(rng)),
        lipids=lipids,
        noise_sigma=cfg.noise_sigma_rel * met_total,
        seed=seed,
        water_damping_hz=rng.uniform(*cfg.water_damping_range),
    )


def make_skull_basis(
    n_basis: int,
    params: AcquisitionParams,
    seed: int,
    amplitude: float = 100.0,
) -> np.ndarray:
    """Synthetic skull-voxel spectra (lipid dominated), columns = spectra."""
    if n_basis < 1:
        raise ValueError("need at least one skull spectrum")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C011]))
    t = params.time_axis_s()
    cols = []
    for _ in range(n_basis):
        fid = np.zeros(params.n_points, dtype=complex)
        for r in default_lipid_resonances(rng, amplitude=amplitude):
            fid += _lorentzian_fid(t, r.amplitude, params.hz_offset(r.shift_ppm),
                                   r.damping_hz, r.phase_rad)
        # small residual water so the basis is not purely lipid
        fid += _lorentzian_fid(t, amplitude * rng.uniform(0.05, 0.2),
                               params.hz_offset(WATER_PPM), rng.uniform(60, 160),
                               rng.uniform(0, 2 * np.pi))
        cols.append(fids_to_bins(fid))
    return np.stack(cols, axis=1)


def make_benchmark(
    n_spectra: int,
    seed: int,
    params: AcquisitionParams = AcquisitionParams(),
    water_factor: float = 1e3,
    n_basis: int = 48,
    cfg: SamplerConfig = SamplerConfig(),
):
    """Sideband-contaminated benchmark used for method comparison.

    Every spectrum has water at ``water_factor`` times the metabolite total,
    quadrature sidebands of at most 1% of the water amplitude, and lipid
    contamination drawn as a leakage mixture of the shared skull basis.

    Returns (records, skull_basis); each record is a dict with the total
    :class:`Fid` under 'fid' and truth spectra arrays under 'm', 'y'.
    """
    basis = make_skull_basis(n_basis, params, seed)
    records = []
    for i in range(n_spectra):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, i]))
        spec = sample_phantom_spec(rng, seed=int(rng.integers(2**31)), cfg=cfg,
                                   lipid_basis_mixture=True)
        spec = replace(spec, water_amp_factor=water_factor)
        total, comps = simulate_fid(spec, params)
        # lipid leakage: nonnegative mixture of skull-basis spectra
        weights = rng.uniform(0, 1, size=basis.shape[1]) ** 4
        met_total = sum(r.amplitude for r in spec.metabolites)
        lipid_bins = basis @ weights
        norm = np.linalg.norm(lipid_bins)
        if norm > 0:
            lipid_bins = lipid_bins * (cfg.lipid_amp_rel * met_total / norm)
        lipid_fid = np.fft.ifft(np.fft.ifftshift(lipid_bins)) * np.sqrt(params.n_points)
        total = Fid(total.samples + lipid_fid, params)
        m_bins = fids_to_bins(comps["m"].samples)
        y_bins = fids_to_bins(total.samples) - m_bins
        records.append({"fid": total, "m": m_bins, "y": y_bins})
    return records, basis


# ---------------------------------------------------------------------------
# dataset export


def export_dataset(
    n_pairs: int,
    out_dir,
    seed: int,
    params: AcquisitionParams = AcquisitionParams(),
    cfg: SamplerConfig = SamplerConfig(),
    n_basis: int = 48,
    beta: float | None = None,
    augment: bool = True,
) -> Path:
    """Write a training dataset: manifest.json + pairs.bin.

    Each record holds x1, x2 and y (complex64, interleaved float32) followed
    by one float32 energy, all after the shared-phase/scale augmentation and
    energy normalization.  Generation is a pure function of the seed.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    basis = make_skull_basis(n_basis, params, seed)
    if beta is None:
        from .nuisance import autotune_beta

        beta = autotune_beta(basis)
    op = build_lipid_operator(basis, beta)
    n = params.n_points
    try:
        with open(out_dir / "pairs.bin", "wb") as fh:
            for i in range(n_pairs):
                rng = np.random.default_rng(np.random.SeedSequence([seed, 2, i]))
                pair = None
                for attempt in range(16):
                    spec = sample_phantom_spec(
                        rng, seed=int(rng.integers(2**31)), cfg=cfg, lipid_basis_mixture=False
                    )
                    try:
                        pair = make_training_pair(spec, op, params, rng=rng, augment=augment)
                        break
                    except DegeneratePairError:
                        continue
                if pair is None:
                    raise RuntimeError(f"record {i}: could not draw a non-degenerate pair")
                rec = np.concatenate([pair.x1.bins, pair.x2.bins, pair.y_truth.bins])
                fh.write(rec.astype(np.complex64).view(np.float32).astype("<f4").tobytes())
                fh.write(struct.pack("<f", pair.energy))
        manifest = {
            "count": n_pairs,
            "seed": seed,
            "n_points": n,
            "record_floats": 6 * n + 1,
            "layout": "x1,x2,y complex64 interleaved + energy float32",
            "beta": beta,
            "acquisition": {
                "bandwidth_hz": params.bandwidth_hz,
                "n_points": params.n_points,
                "te_ms": params.te_ms,
                "field_tesla": params.field_tesla,
                "larmor_mhz": params.larmor_mhz,
                "ref_ppm": params.ref_ppm,
            },
        }
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IOError(f"failed to write dataset at {out_dir}: {exc}") from exc
    return out_dir


def load_dataset(path):
    """Read back an exported dataset: (x1, x2, y, energy) arrays."""
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    n = manifest["n_points"]
    count = manifest["count"]
    raw = np.fromfile(path / "pairs.bin", dtype="<f4")
    per = 6 * n + 1
    if raw.size != count * per:
        raise IOError(f"{path}: pairs.bin has {raw.size} floats, expected {count * per}")
    raw = raw.reshape(count, per)
    cplx = raw[:, : 6 * n].astype(np.float32).view(np.complex64).astype(np.complex128)
    x1 = cplx[:, :n]
    x2 = cplx[:, n : 2 * n]
    y = cplx[:, 2 * n : 3 * n]
    energy = raw[:, -1].astype(np.float64)
    return x1, x2, y, energy, manifest


# ---------------------------------------------------------------------------
# volume phantom


def _ellipsoid_masks(dims) -> tuple[np.ndarray, np.ndarray]:
    nx, ny, nz = dims
    x, y, z = np.meshgrid(
        np.linspace(-1, 1, nx), np.linspace(-1, 1, ny), np.linspace(-1, 1, nz), indexing="ij"
    )
    r = np.sqrt(x**2 + y**2 + z**2)
    brain = r <= 0.62
    skull = (r > 0.72) & (r <= 0.95)
    return brain, skull


def build_volume_phantom(
    dims=(16, 16, 8),
    params: AcquisitionParams = AcquisitionParams(),
    seed: int = 0,
    voxel_mm=(3.4, 3.4, 3.4),
    cfg: SamplerConfig = SamplerConfig(),
    water_factor: float = 1e3,
    noise_sigma: float = 0.0,
):
    """Small volume phantom: ellipsoidal brain, lipid ring, shared sidebands.

    Returns (volume, components) where components maps 'w', 's', 'l', 'm'
    to (nx, ny, nz, n_points) arrays summing to the volume (noise-free).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    brain, skull = _ellipsoid_masks(dims)
    nx, ny, nz = dims
    n = params.n_points
    t = params.time_axis_s()
    comps = {k: np.zeros(dims + (n,), dtype=complex) for k in "wslm"}

    panel = default_metabolite_panel()
    sidebands = default_sideband_set(rng)
    # smooth water amplitude variation across the grid
    gx, gy, gz = np.meshgrid(
        np.linspace(0, np.pi, nx), np.linspace(0, np.pi, ny), np.linspace(0, np.pi, nz),
        indexing="ij",
    )
    water_mod = 1.0 + 0.25 * np.sin(gx) * np.cos(gy) * np.sin(gz + 0.5)

    met_total = sum(r.amplitude for r in panel)
    water_damp = rng.uniform(*cfg.water_damping_range)
    f_water = params.hz_offset(WATER_PPM)
    water_unit = np.exp((2j * np.pi * f_water - water_damp) * t)
    sb_unit = np.zeros(n, dtype=complex)
    for sb in sidebands:
        ph = np.exp(1j * sb.phase_rad)
        sb_unit += sb.amplitude_frac * ph * np.exp((2j * np.pi * (f_water + sb.offset_hz) - sb.decay_hz) * t)
        if sb.mirrored:
            sb_unit += sb.amplitude_frac * ph * np.exp((2j * np.pi * (f_water - sb.offset_hz) - sb.decay_hz) * t)

    met_unit = {}
    for r in panel:
        met_unit[r.name] = np.exp((2j * np.pi * params.hz_offset(r.shift_ppm) - r.damping_hz) * t)

    inside = brain | skull
    for ix, iy, iz in np.argwhere(inside):
        w_amp = water_factor * met_total * water_mod[ix, iy, iz]
        comps["w"][ix, iy, iz] = w_amp * water_unit
        comps["s"][ix, iy, iz] = w_amp * sb_unit
        if brain[ix, iy, iz]:
            for r in panel:
                amp = r.amplitude * rng.uniform(0.7, 1.3)
                comps["m"][ix, iy, iz] += amp * met_unit[r.name]
        else:
            for r in default_lipid_resonances(rng, amplitude=cfg.lipid_amp_rel * met_total):
                comps["l"][ix, iy, iz] += _lorentzian_fid(
                    t, r.amplitude, params.hz_offset(r.shift_ppm), r.damping_hz, r.phase_rad
                )
    total = comps["w"] + comps["s"] + comps["l"] + comps["m"]
    if noise_sigma > 0:
        total = total + noise_sigma * (
            rng.standard_normal(total.shape) + 1j * rng.standard_normal(total.shape)
        )
    vol = SpectralVolume(
        dims=dims, voxel_mm=voxel_mm, fids=total, params=params,
        brain_mask=brain, skull_mask=skull,
    )
    return vol, comps
