import numpy as np
import pytest

from wumrsi.core import GYROMAGNETIC_MHZ_PER_T
from wumrsi.phantom import build_volume_phantom
from wumrsi.qsm import (
    EchoVolume,
    FieldMap,
    combination_te_eff_ms,
    combine_echoes,
    dipole_kernel,
    fid_volume_to_echoes,
    ndi_invert,
    phase_quality,
    qsm_pipeline,
    refine_mask,
    rss_magnitude,
    unwrap_phase,
    vsharp,
)


def sphere_mask(n, radius, center=None):
    c = (n - 1) / 2 if center is None else center
    g = np.mgrid[:n, :n, :n]
    return (g[0] - c) ** 2 + (g[1] - c) ** 2 + (g[2] - c) ** 2 <= radius**2


def forward_field_hz(chi_ppm, b0_tesla=7.0):
    d = dipole_kernel(chi_ppm.shape)
    return GYROMAGNETIC_MHZ_PER_T * b0_tesla * np.real(
        np.fft.ifftn(d * np.fft.fftn(chi_ppm)))


def echoes_from_field(field_hz, mask, te_ms):
    te = np.asarray(te_ms, dtype=float)
    mag = np.where(mask[..., None], np.exp(-te / 25.0), 0.05)
    phase = np.angle(np.exp(1j * 2 * np.pi * field_hz[..., None] * te * 1e-3))
    return EchoVolume(magnitude=mag, phase=phase, te_ms=tuple(te.tolist()))


class TestEchoVolume:
    def test_validation(self):
        mag = np.ones((4, 4, 4, 3))
        with pytest.raises(ValueError):
            EchoVolume(mag, np.zeros((4, 4, 4, 2)), te_ms=(1, 2, 3))
        with pytest.raises(ValueError):
            EchoVolume(mag, np.zeros_like(mag), te_ms=(3, 2, 1))
        with pytest.raises(ValueError):
            EchoVolume(mag, np.full_like(mag, 4.0), te_ms=(1, 2, 3))

    def test_fid_volume_echo_times(self, params):
        vol, _ = build_volume_phantom(dims=(6, 6, 4), params=params, seed=0)
        ev = fid_volume_to_echoes(vol, 56)
        assert ev.n_echoes == 56
        assert np.isclose(ev.te_ms[0], 0.9)
        assert np.isclose(ev.te_ms[-1], 0.9 + 55 * 1000.0 / 2280.0)
        with pytest.raises(ValueError):
            fid_volume_to_echoes(vol, 0)
        with pytest.raises(ValueError):
            fid_volume_to_echoes(vol, params.n_points + 1)

    def test_rss(self):
        mag = np.zeros((2, 2, 2, 2))
        mag[..., 0] = 3.0
        mag[..., 1] = 4.0
        ev = EchoVolume(mag, np.zeros_like(mag), te_ms=(1, 2))
        assert np.allclose(rss_magnitude(ev), 5.0)


class TestUnwrap:
    def test_quality_separates_smooth_from_noise(self):
        rng = np.random.default_rng(0)
        n = 12
        ramp = np.linspace(0, 4 * np.pi, n)[:, None, None, None]
        smooth = np.angle(np.exp(1j * np.broadcast_to(ramp, (n, n, n, 2))))
        noisy = rng.uniform(-np.pi, np.pi, size=(n, n, n, 2))
        assert phase_quality(smooth).mean() > 0.95
        assert phase_quality(noisy).mean() < 0.6

    def test_linear_ramp_unwrapped(self):
        n = 16
        true = np.linspace(0, 6 * np.pi, n)[:, None, None, None]
        true = np.broadcast_to(true, (n, n, n, 1)).copy()
        wrapped = np.angle(np.exp(1j * true))
        ev = EchoVolume(np.ones_like(wrapped), wrapped, te_ms=(5.0,))
        mask = np.ones((n, n, n), dtype=bool)
        unwrapped, quality = unwrap_phase(ev, mask)
        # congruent with the input modulo 2 pi
        k = (unwrapped - wrapped) / (2 * np.pi)
        assert np.max(np.abs(k - np.round(k))) < 1e-9
        # continuous along the ramp up to one global offset
        diff = unwrapped[..., 0] - true[..., 0]
        assert np.ptp(diff) < 1e-9

    def test_empty_mask_rejected(self):
        ev = EchoVolume(np.ones((4, 4, 4, 1)), np.zeros((4, 4, 4, 1)), te_ms=(5.0,))
        with pytest.raises(ValueError):
            unwrap_phase(ev, np.zeros((4, 4, 4), dtype=bool))


class TestRefineMask:
    def test_hole_closed_and_recorded(self):
        n = 12
        mask = sphere_mask(n, 5)
        quality = np.ones((n, n, n))
        c = n // 2
        quality[c, c, c] = 0.0  # single interior dropout
        refined, holes = refine_mask(mask, quality)
        assert refined[c, c, c]
        assert holes[c, c, c]
        assert holes.sum() == 1

    def test_low_quality_rim_removed(self):
        n = 12
        mask = sphere_mask(n, 5)
        quality = np.where(sphere_mask(n, 3), 1.0, 0.0)
        refined, _ = refine_mask(mask, quality, threshold=0.3)
        assert refined.sum() < mask.sum()
        assert not np.any(refined & ~mask)


class TestCombineEchoes:
    def test_exact_linear_phase(self):
        te = np.arange(2.0, 18.0, 2.0)
        field = np.full((4, 4, 4), 12.5)
        phase = 2 * np.pi * field[..., None] * te * 1e-3 + 0.7  # intercept ignored
        mag = np.ones((4, 4, 4, te.size))
        fm = combine_echoes(phase, mag, te)
        assert np.max(np.abs(fm.values - 12.5)) < 1e-9

    def test_weighting_peaks_at_t2star(self):
        # w = TE exp(-TE/25) is maximized at TE = 25 ms
        te = np.arange(4.0, 29.0, 3.0)
        w = te * np.exp(-te / 25.0)
        assert te[int(np.argmax(w))] == 25.0

    def test_needs_two_echoes(self):
        with pytest.raises(ValueError):
            combine_echoes(np.zeros((2, 2, 2, 1)), np.ones((2, 2, 2, 1)), [5.0])

    def test_te_eff_between_extremes(self):
        te = np.arange(2.0, 18.0, 2.0)
        te_eff = combination_te_eff_ms(te)
        assert te.min() < te_eff < te.max()


class TestDipoleKernel:
    def test_reference_values(self):
        d = dipole_kernel((8, 8, 8))
        assert d[0, 0, 0] == 0.0
        assert np.isclose(d[0, 0, 1], 1.0 / 3.0 - 1.0)  # k parallel to b0
        assert np.isclose(d[1, 0, 0], 1.0 / 3.0)  # k perpendicular
        assert np.isclose(d.max(), 1.0 / 3.0) and np.isclose(d.min(), -2.0 / 3.0)


class TestVsharp:
    def test_uniform_background_removed(self):
        n = 32
        mask = sphere_mask(n, 12)
        fm = FieldMap(values=np.where(mask, 40.0, 0.0), mask=mask)
        out = vsharp(fm)
        assert np.max(np.abs(out.values[out.mask])) < 1e-6 * 40.0
        assert np.all(out.mask <= mask)

    def test_kernel_larger_than_volume_rejected(self):
        mask = np.ones((6, 6, 6), dtype=bool)
        fm = FieldMap(values=np.zeros((6, 6, 6)), mask=mask)
        with pytest.raises(ValueError):
            vsharp(fm, radii_mm=[4.0])


class TestNdi:
    def test_trace_monotone_and_sign_correct(self):
        n = 32
        mask = sphere_mask(n, 12)
        chi = np.where(sphere_mask(n, 4), 0.05, 0.0)
        field = forward_field_hz(chi)
        fm = FieldMap(values=np.where(mask, field, 0.0), mask=mask)
        mag = np.where(mask, 1.0, 0.0)
        out = ndi_invert(fm, mag, te_eff_ms=10.0, iters=150)
        trace = np.asarray(out.objective_trace)
        assert np.all(np.diff(trace) <= 1e-12)
        inner = sphere_mask(n, 4)
        assert out.chi[inner & mask].mean() > 0.02
        assert not np.any(out.chi[~mask])

    def test_shape_mismatch(self):
        fm = FieldMap(values=np.zeros((4, 4, 4)), mask=np.ones((4, 4, 4), dtype=bool))
        with pytest.raises(ValueError):
            ndi_invert(fm, np.ones((5, 4, 4)), te_eff_ms=10.0)


class TestPipeline:
    def test_empty_mask_message(self):
        ev = EchoVolume(np.ones((6, 6, 6, 2)), np.zeros((6, 6, 6, 2)), te_ms=(2.0, 4.0))
        with pytest.raises(RuntimeError, match="QSM stage 'unwrap' failed: mask is empty"):
            qsm_pipeline(ev, np.zeros((6, 6, 6), dtype=bool))

    def test_stage_failure_is_labelled(self):
        # volume too small for any SMV kernel: the vsharp stage must fail
        ev = EchoVolume(np.ones((5, 5, 5, 2)), np.zeros((5, 5, 5, 2)), te_ms=(2.0, 4.0))
        with pytest.raises(RuntimeError, match="QSM stage 'vsharp' failed"):
            qsm_pipeline(ev, np.ones((5, 5, 5), dtype=bool), radii_mm=[3.0])

    def test_small_sphere_reconstruction(self):
        n = 32
        mask = sphere_mask(n, 12)
        inner = sphere_mask(n, 4)
        chi = np.where(inner, 0.1, 0.0)
        field = forward_field_hz(chi)
        te = np.arange(2.0, 18.0, 2.0)
        ev = echoes_from_field(field, mask, te)
        stages = qsm_pipeline(ev, mask, iters=200)
        sel = inner & stages.final_mask
        assert np.any(sel)
        est = stages.chi.chi[sel].mean()
        assert abs(est - 0.1) < 0.035
        assert stages.notes["n_echoes"] == te.size
