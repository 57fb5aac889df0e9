"""Evaluation metrics: NRMSE, Bland-Altman agreement, method benchmarks.

Spectra are compared over the metabolite window (1.8 to 4.2 ppm) by default,
since residue outside the window would otherwise dominate the error. NRMSE
is normalized by the l2 norm of the truth.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Spectrum, ppm_band_indices
from .fitting import SIGNAL_BAND_PPM

log = logging.getLogger(__name__)


def nrmse(est, truth) -> float:
    """100 * ||est - truth|| / ||truth||. Raises on zero-norm truth."""
    est = np.asarray(est)
    truth = np.asarray(truth)
    if est.shape != truth.shape:
        raise ValueError("est and truth must have the same shape")
    norm = np.linalg.norm(truth)
    if norm == 0:
        raise ValueError("truth has zero norm")
    return float(100.0 * np.linalg.norm(est - truth) / norm)


def spectrum_nrmse(est: Spectrum, truth: Spectrum, band_ppm=SIGNAL_BAND_PPM) -> float:
    """NRMSE between two spectra restricted to a ppm window.

    band_ppm=None compares the full axis.
    """
    est.require_same_axis(truth)
    if band_ppm is None:
        return nrmse(est.bins, truth.bins)
    lo, hi = band_ppm
    center = 0.5 * (lo + hi)
    idx = ppm_band_indices(truth, center, 0.5 * (hi - lo))
    return nrmse(est.bins[idx], truth.bins[idx])


@dataclass(frozen=True)
class BlandAltman:
    """Agreement between two paired measurement sets."""

    bias: float
    loa_low: float
    loa_high: float
    n: int
    pairs: tuple

    def __post_init__(self):
        if not (self.loa_low <= self.bias <= self.loa_high):
            raise ValueError("limits of agreement must bracket the bias")


def bland_altman(a, b, percentage: bool = False) -> BlandAltman:
    """Bland-Altman of a against b over finite pairs.

    diff = a - b, or 200*(a-b)/(a+b) when percentage is set (pairs summing
    to zero are dropped). Limits of agreement are bias +- 1.96 sd.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise ValueError("a and b must have equal length")
    finite = np.isfinite(a) & np.isfinite(b)
    a = a[finite]
    b = b[finite]
    if percentage:
        s = a + b
        keep = s != 0
        a, b, s = a[keep], b[keep], s[keep]
        diff = 200.0 * (a - b) / s
    else:
        diff = a - b
    if diff.size < 2:
        raise ValueError("need at least 2 finite pairs")
    mean = 0.5 * (a + b)
    bias = float(np.mean(diff))
    sd = float(np.std(diff, ddof=1))
    return BlandAltman(
        bias=bias,
        loa_low=bias - 1.96 * sd,
        loa_high=bias + 1.96 * sd,
        n=int(diff.size),
        pairs=tuple(zip(mean.tolist(), diff.tolist())),
    )


def _summary(values) -> dict:
    """Mean/median/quartiles over finite entries, with counts."""
    values = np.asarray(values, dtype=float)
    finite = values[np.isfinite(values)]
    out = {"n_total": int(values.size), "n_finite": int(finite.size)}
    if finite.size:
        out.update(
            mean=float(np.mean(finite)),
            median=float(np.median(finite)),
            q1=float(np.percentile(finite, 25)),
            q3=float(np.percentile(finite, 75)),
        )
    else:
        out.update(mean=float("nan"), median=float("nan"),
                   q1=float("nan"), q3=float("nan"))
    return out


@dataclass(frozen=True)
class EvalReport:
    """Per-method evaluation: NRMSE distribution plus optional agreement."""

    method_tag: str
    nrmse_per_case: tuple
    bland_altman_by_quantity: dict = field(default_factory=dict)
    fit_quality: dict = field(default_factory=dict)
    n_failed: int = 0

    @property
    def nrmse_mean(self) -> float:
        finite = [v for v in self.nrmse_per_case if np.isfinite(v)]
        return float(np.mean(finite)) if finite else float("nan")

    def summary(self) -> dict:
        return _summary(self.nrmse_per_case)


def method_benchmark(
    records,
    methods: dict,
    band_ppm=SIGNAL_BAND_PPM,
) -> dict:
    """Run each cleaning method over benchmark records and score NRMSE.

    records: sequence of dicts with 'fid' (contaminated Fid) and 'm'
    (ground-truth metabolite spectrum bins). methods maps tag ->
    callable(Fid) -> Fid returning the cleaned signal. Per-case failures
    are logged and excluded from the aggregates but counted.
    """
    from .core import fid_to_spectrum

    reports = {}
    for tag, fn in methods.items():
        scores = []
        n_failed = 0
        for i, rec in enumerate(records):
            params = rec["fid"].params
            truth = Spectrum(rec["m"], params.ppm_axis(), params)
            try:
                cleaned = fn(rec["fid"])
                scores.append(spectrum_nrmse(fid_to_spectrum(cleaned), truth,
                                             band_ppm=band_ppm))
            except Exception:
                log.exception("method %s failed on case %d", tag, i)
                scores.append(float("nan"))
                n_failed += 1
        reports[tag] = EvalReport(
            method_tag=tag, nrmse_per_case=tuple(scores), n_failed=n_failed
        )
    return reports


# ---------------------------------------------------------------------------
# report files


def write_report_csv(reports: dict, out_dir, benchmark_id: str = "bench") -> list:
    """Per-case and summary CSV tables; one per-case file per method."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    summary_path = out_dir / f"{benchmark_id}_summary.csv"
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["# NRMSE normalized by truth l2 norm, percent"])
        w.writerow(["method", "mean", "median", "q1", "q3",
                    "n_finite", "n_total", "n_failed"])
        for tag in sorted(reports):
            s = reports[tag].summary()
            w.writerow([tag, s["mean"], s["median"], s["q1"], s["q3"],
                        s["n_finite"], s["n_total"], reports[tag].n_failed])
    written.append(summary_path)
    for tag in sorted(reports):
        path = out_dir / f"{benchmark_id}_{tag}_cases.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "nrmse_percent"])
            for i, v in enumerate(reports[tag].nrmse_per_case):
                w.writerow([i, v])
        written.append(path)
    return written


def write_report_plot(reports: dict, out_dir, benchmark_id: str = "bench") -> Path:
    """Box plot of per-case NRMSE by method, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tags = sorted(reports)
    data = [
        [v for v in reports[t].nrmse_per_case if np.isfinite(v)] or [float("nan")]
        for t in tags
    ]
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(tags), 4))
    ax.boxplot(data, tick_labels=tags)
    ax.set_ylabel("NRMSE (%)")
    ax.set_title(benchmark_id)
    path = out_dir / f"{benchmark_id}_nrmse.svg"
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return path


def bland_altman_plot(ba: BlandAltman, out_path, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    means, diffs = zip(*ba.pairs) if ba.pairs else ((), ())
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(means, diffs, s=10, alpha=0.6)
    for y, style in ((ba.bias, "-"), (ba.loa_low, "--"), (ba.loa_high, "--")):
        ax.axhline(y, color="k", linestyle=style, linewidth=0.8)
    ax.set_xlabel("mean")
    ax.set_ylabel("difference")
    if title:
        ax.set_title(title)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out_path
