import csv

import numpy as np
import pytest

from wumrsi.core import Fid, Spectrum, fid_to_spectrum
from wumrsi.metrics import (
    BlandAltman,
    EvalReport,
    bland_altman,
    bland_altman_plot,
    method_benchmark,
    nrmse,
    spectrum_nrmse,
    write_report_csv,
    write_report_plot,
)

from conftest import lorentzian_fid


class TestNrmse:
    def test_identity_is_zero(self):
        x = np.array([1.0, -2.0, 3.0])
        assert nrmse(x, x) == 0.0

    def test_hand_value(self):
        assert np.isclose(nrmse(np.array([1.0, 1.0]), np.array([1.0, 0.0])), 100.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        est, truth = rng.standard_normal(50), rng.standard_normal(50)
        assert np.isclose(nrmse(3 * est, 3 * truth), nrmse(est, truth))

    def test_zero_truth_rejected(self):
        with pytest.raises(ValueError):
            nrmse(np.ones(4), np.zeros(4))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nrmse(np.ones(4), np.ones(5))

    def test_spectrum_band_restriction(self, params):
        truth = fid_to_spectrum(lorentzian_fid(params, 1.0, params.hz_offset(3.0), 10.0))
        # contaminate only outside the metabolite window
        junk = fid_to_spectrum(lorentzian_fid(params, 5.0, params.hz_offset(8.0), 10.0))
        est = Spectrum(truth.bins + junk.bins, truth.ppm_axis, params)
        in_band = spectrum_nrmse(est, truth)
        full = spectrum_nrmse(est, truth, band_ppm=None)
        # only the Lorentzian tail of the junk line leaks into the window
        assert in_band < 20.0
        assert full > 100.0


class TestBlandAltman:
    def test_self_agreement(self):
        a = np.array([1.0, 2.0, 3.0, 4.0])
        ba = bland_altman(a, a)
        assert ba.bias == 0.0 and ba.loa_low == 0.0 and ba.loa_high == 0.0
        assert ba.n == 4

    def test_swap_antisymmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal(30), rng.standard_normal(30)
        f, r = bland_altman(a, b), bland_altman(b, a)
        assert np.isclose(f.bias, -r.bias)
        assert np.isclose(f.loa_low, -r.loa_high)
        assert np.isclose(f.loa_high, -r.loa_low)

    def test_known_bias(self):
        a = np.array([1.0, 2.0, 3.0])
        ba = bland_altman(a + 0.5, a)
        assert np.isclose(ba.bias, 0.5)
        assert np.isclose(ba.loa_low, 0.5) and np.isclose(ba.loa_high, 0.5)

    def test_percentage_mode_drops_zero_sums(self):
        a = np.array([1.0, 2.0, 1.0])
        b = np.array([1.0, 2.0, -1.0])
        ba = bland_altman(a, b, percentage=True)
        assert ba.n == 2
        assert ba.bias == 0.0

    def test_nonfinite_pairs_dropped(self):
        a = np.array([1.0, np.nan, 3.0, 4.0])
        b = np.array([1.0, 2.0, np.inf, 4.0])
        assert bland_altman(a, b).n == 2

    def test_too_few_pairs(self):
        with pytest.raises(ValueError):
            bland_altman([1.0], [1.0])
        with pytest.raises(ValueError):
            bland_altman([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_loa_must_bracket_bias(self):
        with pytest.raises(ValueError):
            BlandAltman(bias=1.0, loa_low=2.0, loa_high=3.0, n=2, pairs=())


class TestBenchmark:
    def make_records(self, params, n=4):
        records = []
        for i in range(n):
            met = lorentzian_fid(params, 1.0, params.hz_offset(2.01), 12.0)
            water = lorentzian_fid(params, 100.0 * (i + 1), params.hz_offset(4.7), 60.0)
            records.append({
                "fid": Fid(met.samples + water.samples, params),
                "m": fid_to_spectrum(met).bins,
            })
        return records

    def test_perfect_method_scores_zero(self, params):
        records = self.make_records(params)
        truths = iter([r["fid"] for r in records])

        def identity(fid):
            return fid

        def oracle(fid):
            # peel off the known water line exactly
            water = lorentzian_fid(
                params, np.abs(fid.samples[0]) - 1.0, params.hz_offset(4.7), 60.0)
            return Fid(fid.samples - water.samples, params)

        reports = method_benchmark(records, {"identity": identity, "oracle": oracle})
        assert reports["oracle"].nrmse_mean < 1.0
        assert reports["identity"].nrmse_mean > reports["oracle"].nrmse_mean
        assert reports["identity"].n_failed == 0

    def test_failures_counted_not_fatal(self, params):
        records = self.make_records(params, n=3)

        def flaky(fid):
            if np.abs(fid.samples[0]) > 150:
                raise RuntimeError("boom")
            return fid

        reports = method_benchmark(records, {"flaky": flaky})
        rep = reports["flaky"]
        assert rep.n_failed == 2
        assert sum(np.isnan(v) for v in rep.nrmse_per_case) == 2
        assert np.isfinite(rep.nrmse_mean)

    def test_all_failed_mean_nan(self):
        rep = EvalReport(method_tag="x", nrmse_per_case=(float("nan"),) * 3, n_failed=3)
        assert np.isnan(rep.nrmse_mean)
        s = rep.summary()
        assert s["n_finite"] == 0 and s["n_total"] == 3


class TestReportFiles:
    def test_csv_and_plots_written(self, tmp_path):
        reports = {
            "a": EvalReport(method_tag="a", nrmse_per_case=(1.0, 2.0, 3.0)),
            "b": EvalReport(method_tag="b", nrmse_per_case=(4.0, float("nan")), n_failed=1),
        }
        written = write_report_csv(reports, tmp_path, "bench")
        assert all(p.exists() for p in written)
        with open(tmp_path / "bench_summary.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[1][0] == "method"
        assert {r[0] for r in rows[2:]} == {"a", "b"}
        svg = write_report_plot(reports, tmp_path, "bench")
        assert svg.exists() and svg.suffix == ".svg"
        ba = bland_altman([1.0, 2.0, 3.0], [1.1, 1.9, 3.2])
        out = bland_altman_plot(ba, tmp_path / "ba.svg", title="t")
        assert out.exists()
