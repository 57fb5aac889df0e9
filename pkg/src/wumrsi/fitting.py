"""Linear-combination spectral fitting with CRLB/SNR/FWHM quality metrics
and water-referenced absolute quantification.

The model is x(f) ~ sum_j a_j B_j(f; df, phi, gamma) with nonnegative
amplitudes a and three global nuisance parameters: frequency shift df (Hz),
zero-order phase phi (rad) and extra Lorentzian damping gamma (1/s).  The
nuisance parameters act on the basis in the time domain; amplitudes are
solved by NNLS inside a bounded quasi-Newton outer loop (separable least
squares).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, nnls

from .core import AcquisitionParams, Spectrum, bins_to_fids, fids_to_bins
from .phantom import _lorentzian_fid

log = logging.getLogger(__name__)

SHIFT_BOUND_HZ = 40.0
DAMPING_BOUND_HZ = 30.0
SIGNAL_BAND_PPM = (1.8, 4.2)
NOISE_BAND_PPM = (8.5, 10.5)


@dataclass(frozen=True)
class BasisSet:
    """Named basis spectra sharing one axis."""

    entries: tuple  # of (name, Spectrum)
    te_ms: float

    def __post_init__(self):
        entries = tuple((str(n), s) for n, s in self.entries)
        if not entries:
            raise ValueError("basis set is empty")
        names = [n for n, _ in entries]
        if len(set(names)) != len(names):
            raise ValueError("basis names must be unique")
        first = entries[0][1]
        for _, s in entries[1:]:
            first.require_same_axis(s)
        object.__setattr__(self, "entries", entries)

    @property
    def names(self) -> list:
        return [n for n, _ in self.entries]

    @property
    def params(self) -> AcquisitionParams:
        return self.entries[0][1].params

    def fid_matrix(self) -> np.ndarray:
        """Basis FIDs as an (n_points, n_basis) matrix."""
        return np.stack(
            [bins_to_fids(s.bins) for _, s in self.entries], axis=1
        )


def basis_from_panel(
    panel=None, params: AcquisitionParams = AcquisitionParams(), damping_hz: float | None = None
) -> BasisSet:
    """Synthesize unit-amplitude Lorentzian basis spectra from a resonance panel."""
    from .phantom import default_metabolite_panel

    if panel is None:
        panel = default_metabolite_panel()
    t = params.time_axis_s()
    entries = []
    for r in panel:
        gamma = damping_hz if damping_hz is not None else r.damping_hz
        fid = _lorentzian_fid(t, 1.0, params.hz_offset(r.shift_ppm), gamma, 0.0)
        entries.append((r.name or f"{r.shift_ppm:g}ppm", Spectrum(
            fids_to_bins(fid), params.ppm_axis(), params)))
    return BasisSet(entries=tuple(entries), te_ms=params.te_ms)


@dataclass
class FitResult:
    amplitudes: dict
    global_shift_hz: float
    global_phase_rad: float
    extra_damping_hz: float
    residual: Spectrum
    snr: float
    fwhm_ppm: float
    crlb_rel: dict = field(default_factory=dict)
    converged: bool = True
    objective_trace: list = field(default_factory=list)
    basis: BasisSet | None = None

    def amplitude_vector(self) -> np.ndarray:
        return np.array([self.amplitudes[n] for n in self.basis.names])


def _modulated_basis(basis_fids: np.ndarray, t: np.ndarray, df: float, phi: float, gamma: float):
    mod = np.exp((2j * np.pi * df - gamma) * t + 1j * phi)
    return basis_fids * mod[:, None]


def _stack_ri(a: np.ndarray) -> np.ndarray:
    return np.concatenate([a.real, a.imag], axis=0)


def _nnls_amplitudes(A: np.ndarray, target: np.ndarray):
    amps, rnorm = nnls(_stack_ri(A), _stack_ri(target))
    return amps, rnorm**2


def fit_spectrum(
    x: Spectrum,
    basis: BasisSet,
    nonneg: bool = True,
    max_iter: int = 200,
    coarse_shift_step_hz: float = 5.0,
) -> FitResult:
    """Separable least-squares fit of a spectrum against a basis set.

    Inner nonnegative linear solve for amplitudes; outer bounded L-BFGS-B
    over (shift, phase, damping), seeded by a coarse shift grid.
    """
    x.require_same_axis(basis.entries[0][1])
    params = x.params
    t = params.time_axis_s()
    target = bins_to_fids(x.bins)  # fit in the time domain (unitary: same optimum)
    basis_fids = basis.fid_matrix()
    nb = basis_fids.shape[1]

    if not np.any(x.bins):
        zero_amps = {n: 0.0 for n in basis.names}
        return FitResult(
            amplitudes=zero_amps, global_shift_hz=0.0, global_phase_rad=0.0,
            extra_damping_hz=0.0,
            residual=Spectrum(np.zeros_like(x.bins), x.ppm_axis, params),
            snr=float("nan"), fwhm_ppm=float("nan"), basis=basis,
        )

    def solve_inner(theta):
        df, phi, gamma = theta
        A = _modulated_basis(basis_fids, t, df, phi, gamma)
        if nonneg:
            return _nnls_amplitudes(A, target)
        amps, *_ = np.linalg.lstsq(_stack_ri(A), _stack_ri(target), rcond=None)
        r = _stack_ri(target) - _stack_ri(A) @ amps
        return amps, float(r @ r)

    def objective(theta):
        return solve_inner(theta)[1]

    # coarse grid over the shift to escape the oscillatory landscape
    best_theta, best_obj = None, np.inf
    for df0 in np.arange(-SHIFT_BOUND_HZ, SHIFT_BOUND_HZ + 1e-9, coarse_shift_step_hz):
        obj = objective((df0, 0.0, 1.0))
        if obj < best_obj:
            best_obj, best_theta = obj, (df0, 0.0, 1.0)

    trace = [best_obj]

    def record(theta):
        trace.append(objective(theta))

    res = minimize(
        objective,
        np.array(best_theta),
        method="L-BFGS-B",
        bounds=[(-SHIFT_BOUND_HZ, SHIFT_BOUND_HZ), (-2 * np.pi, 2 * np.pi),
                (0.0, DAMPING_BOUND_HZ)],
        callback=record,
        options={"maxiter": max_iter},
    )
    converged = bool(res.success) or res.fun <= best_obj + 1e-15
    if not res.success:
        log.warning("fit did not converge: %s", res.message)
    df, phi, gamma = res.x
    amps, _ = solve_inner(res.x)
    A = _modulated_basis(basis_fids, t, df, phi, gamma)
    model_fid = A @ amps
    residual_bins = x.bins - fids_to_bins(model_fid)
    residual = Spectrum(residual_bins, x.ppm_axis, params)
    snr = compute_snr(x)
    # FWHM at the dominant fitted peak
    fwhm = float("nan")
    if np.any(amps > 0):
        jmax = int(np.argmax(amps))
        peak_ppm = _basis_peak_ppm(basis, jmax)
        try:
            fwhm = compute_fwhm(x, peak_ppm + df / params.larmor_mhz)
        except ValueError:
            pass
    return FitResult(
        amplitudes=dict(zip(basis.names, amps.tolist())),
        global_shift_hz=float(df),
        global_phase_rad=float(phi),
        extra_damping_hz=float(gamma),
        residual=residual,
        snr=snr,
        fwhm_ppm=fwhm,
        converged=converged,
        objective_trace=trace,
        basis=basis,
    )


def _basis_peak_ppm(basis: BasisSet, j: int) -> float:
    _, spec = basis.entries[j]
    return float(spec.ppm_axis[int(np.argmax(np.abs(spec.bins)))])


# ---------------------------------------------------------------------------
# CRLB


def _model_jacobian(fit: FitResult, params: AcquisitionParams) -> np.ndarray:
    """Complex Jacobian (time domain) wrt (a_1..a_J, df, phi, gamma)."""
    basis = fit.basis
    t = params.time_axis_s()
    df, phi, gamma = fit.global_shift_hz, fit.global_phase_rad, fit.extra_damping_hz
    A = _modulated_basis(basis.fid_matrix(), t, df, phi, gamma)
    amps = fit.amplitude_vector()
    model = A @ amps
    J_df = 2j * np.pi * t * model
    J_phi = 1j * model
    J_gamma = -t * model
    return np.column_stack([A, J_df, J_phi, J_gamma])


def compute_crlb(fit: FitResult, x: Spectrum, noise_sigma: float) -> dict:
    """Relative CRLB (%) per metabolite from the Fisher matrix at the optimum.

    ``noise_sigma`` is the standard deviation of the real and imaginary noise
    channels (per complex sample).  Zero amplitudes report infinite CRLB.
    """
    if noise_sigma <= 0:
        raise ValueError("noise_sigma must be positive")
    if fit.basis is None:
        raise ValueError("fit carries no basis; cannot rebuild the Jacobian")
    J = _model_jacobian(fit, x.params)
    F = np.real(J.conj().T @ J) / noise_sigma**2
    names = fit.basis.names
    amps = fit.amplitude_vector()
    out = {}
    try:
        cov = np.linalg.inv(F)
        var = np.diag(cov)[: len(names)]
        if np.any(var < 0):
            raise np.linalg.LinAlgError("negative variance")
        for n, a, v in zip(names, amps, var):
            out[n] = float(100.0 * np.sqrt(v) / a) if a > 0 else float("inf")
    except np.linalg.LinAlgError:
        for n in names:
            out[n] = float("inf")
    fit.crlb_rel = out
    return out


# ---------------------------------------------------------------------------
# SNR / FWHM


def _band_slice(ppm: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.nonzero((ppm >= lo) & (ppm <= hi))[0]


def noise_band_indices(spec: Spectrum, noise_band=NOISE_BAND_PPM, min_bins: int = 16):
    """Noise-region bins: the preferred band, its mirror about the carrier,
    or the outermost ppm of the axis when both fall off the grid."""
    ppm = spec.ppm_axis
    ref = spec.params.ref_ppm
    candidates = [noise_band, (2 * ref - noise_band[1], 2 * ref - noise_band[0])]
    best = np.array([], dtype=int)
    for lo, hi in candidates:
        idx = _band_slice(ppm, lo, hi)
        if idx.size > best.size:
            best = idx
    if best.size < min_bins:
        # fall back to the top of the axis, above the spectral content
        hi = ppm.max()
        best = _band_slice(ppm, hi - 1.0, hi)
    if best.size < 2:
        raise ValueError("no usable noise band on this axis")
    return best


def compute_snr(spec: Spectrum, signal_band=SIGNAL_BAND_PPM, noise_band=NOISE_BAND_PPM) -> float:
    """Peak real signal in the metabolite band over the noise-region std."""
    ppm = spec.ppm_axis
    sig_idx = _band_slice(ppm, *signal_band)
    if sig_idx.size == 0:
        raise ValueError("signal band not on axis")
    noise_idx = noise_band_indices(spec, noise_band)
    peak = float(np.max(np.abs(spec.bins[sig_idx].real)))
    sigma = float(np.std(spec.bins[noise_idx].real))
    if sigma == 0:
        return float("inf")
    return peak / sigma


def compute_fwhm(spec: Spectrum, peak_ppm: float, noise_factor: float = 3.0) -> float:
    """Full width at half maximum (ppm) of the magnitude peak near peak_ppm.

    Half-maximum crossings are located by linear interpolation.  Returns NaN
    when the peak does not rise noise_factor times above the local noise.
    """
    ppm = spec.ppm_axis
    mag = np.abs(spec.bins)
    # search for the local peak within +/- 0.15 ppm of the nominal position
    idx = _band_slice(ppm, peak_ppm - 0.15, peak_ppm + 0.15)
    if idx.size == 0:
        raise ValueError("peak_ppm not on axis")
    k = idx[int(np.argmax(mag[idx]))]
    peak = mag[k]
    try:
        noise_idx = noise_band_indices(spec)
        local_noise = float(np.std(spec.bins[noise_idx].real))
    except ValueError:
        local_noise = 0.0
    if local_noise > 0 and peak < noise_factor * local_noise:
        return float("nan")
    half = peak / 2.0
    if peak == 0:
        return float("nan")
    # walk outward to the half-maximum crossings
    i = k
    while i > 0 and mag[i] > half:
        i -= 1
    if mag[i] > half:
        return float("nan")
    left = np.interp(half, [mag[i], mag[i + 1]], [ppm[i], ppm[i + 1]])
    j = k
    nlast = mag.size - 1
    while j < nlast and mag[j] > half:
        j += 1
    if mag[j] > half:
        return float("nan")
    right = np.interp(half, [mag[j], mag[j - 1]], [ppm[j], ppm[j - 1]])
    return float(abs(right - left))


# ---------------------------------------------------------------------------
# absolute quantification


def steady_state_attenuation(t1_ms: float, tr_ms: float, flip_deg: float) -> float:
    """Spoiled steady-state signal attenuation sin(a)(1-E1)/(1-E1 cos(a))."""
    if t1_ms <= 0:
        raise ValueError("T1 must be positive")
    e1 = np.exp(-tr_ms / t1_ms)
    a = np.deg2rad(flip_deg)
    return float(np.sin(a) * (1 - e1) / (1 - e1 * np.cos(a)))


def quantify_absolute(
    met_amp: np.ndarray,
    water_amp: np.ndarray,
    t1_met_ms: float,
    t1_water_ms: float,
    tr_ms: float,
    flip_deg: float,
    water_conc_mM: float = 38857.0,
) -> np.ndarray:
    """Internal-water-referenced concentrations (mM).

    C_met = (S_met / S_water) * water_conc_mM * (R_water / R_met) with R the
    spoiled steady-state attenuation for the respective T1.  T2 correction
    is omitted (ultra-short echo).  The default water concentration assumes
    55.51 M pure water at 70% tissue water content (38.86 M).  Voxels with
    non-positive water signal map to NaN.
    """
    met_amp = np.asarray(met_amp, dtype=float)
    water_amp = np.asarray(water_amp, dtype=float)
    if met_amp.shape != water_amp.shape:
        raise ValueError("metabolite and water maps must have the same shape")
    r_met = steady_state_attenuation(t1_met_ms, tr_ms, flip_deg)
    r_water = steady_state_attenuation(t1_water_ms, tr_ms, flip_deg)
    with np.errstate(divide="ignore", invalid="ignore"):
        conc = met_amp / water_amp * water_conc_mM * (r_water / r_met)
    conc = np.where(water_amp > 0, conc, np.nan)
    return conc
