"""Command-line front end.

Every command reads an optional YAML config (command-name section), applies
flag overrides on top, validates against the documented defaults (unknown
keys rejected), runs, and serializes the effective config plus versions,
seed and wall time into run_meta.json in the output directory.
"""

from __future__ import annotations

import json
import platform
import sys
import time
from pathlib import Path

import click
import numpy as np
import scipy
import yaml

from . import __version__
from .core import AcquisitionParams, Fid, fid_to_spectrum, fids_to_bins
from .wmk import read_spectral_volume, read_wmk, write_spectral_volume, write_wmk


class ConfigError(click.ClickException):
    exit_code = 2


# per-command defaults; these are the single source of truth for RunConfig
DEFAULTS = {
    "acquisition": {
        "bandwidth_hz": 2280.0,
        "n_points": 451,
        "te_ms": 0.9,
        "field_tesla": 7.0,
        "larmor_mhz": 297.2,
        "ref_ppm": 4.7,
    },
    "simulate": {
        "dims": [16, 16, 8],
        "voxel_mm": [3.4, 3.4, 3.4],
        "water_factor": 1000.0,
        "noise_sigma": 0.0,
    },
    "remove_nuisance": {
        "method": "hlsvd_l2",
        "hlsvd_rank": 32,
        "beta": None,
        "subtract_path": None,
        "truth_path": None,
        "fail_ratio_max": 0.1,
    },
    "fit": {
        "truth_path": None,
        "noise_sigma": None,
    },
    "qsm": {
        "n_echoes": 56,
        "t2star_ms": 25.0,
        "quality_threshold": 0.3,
        "iters": 500,
        "lam": 1.0e-4,
    },
    "mwf": {
        "tukey": False,
        "tukey_alpha": 0.4,
        "crop_last_te_ms": None,
        "rpca": True,
    },
    "eval": {
        "est_path": None,
        "ref_path": None,
        "percentage": False,
        "mask_name": "brain_mask",
    },
    "export_dataset": {
        "n_pairs": 100,
        "n_basis": 48,
        "augment": True,
    },
}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = dict(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _load_config(config_path, command: str, overrides: dict) -> dict:
    """defaults <- config file section <- command-line flags."""
    file_cfg = {}
    if config_path:
        with open(config_path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: top level must be a mapping")
        for section in loaded:
            if section not in DEFAULTS:
                raise ConfigError(f"{config_path}: unknown section '{section}'")
        file_cfg = loaded
    cfg = {
        "acquisition": _merge(DEFAULTS["acquisition"], file_cfg.get("acquisition", {})),
        command: _merge(DEFAULTS[command], file_cfg.get(command, {})),
    }
    cfg[command] = _merge(cfg[command], {k: v for k, v in overrides.items() if v is not None})
    return cfg


def _acq(cfg: dict) -> AcquisitionParams:
    a = cfg["acquisition"]
    return AcquisitionParams(
        bandwidth_hz=float(a["bandwidth_hz"]),
        n_points=int(a["n_points"]),
        te_ms=float(a["te_ms"]),
        field_tesla=float(a["field_tesla"]),
        larmor_mhz=float(a["larmor_mhz"]),
        ref_ppm=float(a["ref_ppm"]),
    )


def _write_meta(out_dir: Path, command: str, cfg: dict, seed: int, threads: int,
                t0: float, extra: dict | None = None):
    meta = {
        "command": command,
        "config": cfg,
        "seed": seed,
        "threads": threads,
        "versions": {
            "wumrsi": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "wall_time_s": time.monotonic() - t0,
    }
    if extra:
        meta.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _stage_fail(stage: str, exc: Exception):
    raise click.ClickException(f"stage '{stage}': {exc}")


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML config; one section per command plus 'acquisition'.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=1, show_default=True,
              help="Parallelism budget handed to the pipelines.")
@click.option("--out", "out_dir", type=click.Path(), default="out", show_default=True)
@click.pass_context
def main(ctx, config_path, seed, threads, out_dir):
    """Water-unsuppressed MRSI processing pipelines."""
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, seed=seed, threads=threads,
                   out_dir=Path(out_dir), t0=time.monotonic())


@main.command()
@click.option("--dims", type=int, nargs=3, default=None)
@click.option("--water-factor", type=float, default=None)
@click.option("--noise-sigma", type=float, default=None)
@click.pass_obj
def simulate(obj, dims, water_factor, noise_sigma):
    """Simulate a volume phantom and write it plus w/s/l/m components."""
    from .phantom import build_volume_phantom

    overrides = {"dims": list(dims) if dims else None,
                 "water_factor": water_factor, "noise_sigma": noise_sigma}
    cfg = _load_config(obj["config_path"], "simulate", overrides)
    sim = cfg["simulate"]
    d = tuple(int(v) for v in sim["dims"])
    if min(d) < 1:
        raise ConfigError(f"simulate.dims: every dim must be >= 1, got {list(d)}")
    params = _acq(cfg)
    out = obj["out_dir"]
    try:
        vol, comps = build_volume_phantom(
            dims=d, params=params, seed=obj["seed"],
            voxel_mm=tuple(sim["voxel_mm"]),
            water_factor=float(sim["water_factor"]),
            noise_sigma=float(sim["noise_sigma"]),
        )
        write_spectral_volume(out / "phantom.wmk", vol)
        for name in "wslm":
            write_wmk(out / f"component_{name}.wmk", comps[name],
                      voxel_mm=vol.voxel_mm, params=params)
    except click.ClickException:
        raise
    except Exception as exc:
        _stage_fail("simulate", exc)
    _write_meta(out, "simulate", cfg, obj["seed"], obj["threads"], obj["t0"])
    click.echo(f"phantom written to {out}")


@main.command("remove-nuisance")
@click.argument("input_path", type=click.Path(exists=True))
@click.option("--method", type=click.Choice(["hlsvd-l2", "modulus-l2", "subtract-file"]),
              default=None)
@click.option("--subtract", "subtract_path", type=click.Path(exists=True), default=None,
              help="WMK volume of nuisance spectra y (subtract-file method).")
@click.option("--truth", "truth_path", type=click.Path(exists=True), default=None,
              help="WMK volume of ground-truth metabolite FIDs; triggers NRMSE report.")
@click.pass_obj
def remove_nuisance(obj, input_path, method, subtract_path, truth_path):
    """Remove water, sidebands and lipids from a WMK spectral volume."""
    from .metrics import nrmse, write_report_csv, EvalReport
    from .nuisance import classical_pipeline
    from .core import bins_to_fids

    overrides = {
        "method": method.replace("-", "_") if method else None,
        "subtract_path": subtract_path,
        "truth_path": truth_path,
    }
    cfg = _load_config(obj["config_path"], "remove_nuisance", overrides)
    rn = cfg["remove_nuisance"]
    out = obj["out_dir"]
    vol = read_spectral_volume(input_path)
    tag = rn["method"]

    report_info = {}
    if tag == "subtract_file":
        if not rn["subtract_path"]:
            raise ConfigError("subtract-file method needs --subtract PATH")
        try:
            y_vol = read_wmk(rn["subtract_path"])
            if y_vol.data.shape != vol.fids.shape:
                raise ValueError("subtract volume shape does not match the input")
            clean_bins = fids_to_bins(vol.fids) - fids_to_bins(y_vol.data)
            cleaned = vol.with_fids(
                np.where(vol.brain_mask[..., None], bins_to_fids(clean_bins), 0.0)
            )
        except click.ClickException:
            raise
        except Exception as exc:
            _stage_fail("subtract", exc)
    else:
        try:
            from .nuisance import HlsvdConfig

            cleaned, rep = classical_pipeline(
                vol, tag, hlsvd_cfg=HlsvdConfig(rank=int(rn["hlsvd_rank"])),
                beta=rn["beta"],
            )
        except Exception as exc:
            _stage_fail(tag, exc)
        report_info = {
            "n_processed": rep.n_processed,
            "n_failed": rep.n_failed,
            "beta": rep.beta,
            "beta_fallback": rep.beta_fallback,
        }
        total = rep.n_processed + rep.n_failed
        if total and rep.n_failed / total > float(rn["fail_ratio_max"]):
            _write_meta(out, "remove-nuisance", cfg, obj["seed"], obj["threads"],
                        obj["t0"], {"report": report_info})
            raise click.ClickException(
                f"stage '{tag}': {rep.n_failed}/{total} voxels failed, "
                f"above fail_ratio_max={rn['fail_ratio_max']}"
            )
    write_spectral_volume(out / "cleaned.wmk", cleaned)

    if rn["truth_path"]:
        truth = read_wmk(rn["truth_path"])
        from .metrics import spectrum_nrmse
        from .core import spectrum_at

        truth_bins = fids_to_bins(truth.data)
        scores = []
        for ix, iy, iz in np.argwhere(vol.brain_mask):
            t_spec = fid_to_spectrum(Fid(truth.data[ix, iy, iz], vol.params))
            c_spec = spectrum_at(cleaned, ix, iy, iz)
            try:
                scores.append(spectrum_nrmse(c_spec, t_spec))
            except ValueError:
                scores.append(float("nan"))
        rep = EvalReport(method_tag=tag, nrmse_per_case=tuple(scores))
        write_report_csv({tag: rep}, out, benchmark_id="remove_nuisance")
        report_info["nrmse_mean"] = rep.nrmse_mean
    _write_meta(out, "remove-nuisance", cfg, obj["seed"], obj["threads"], obj["t0"],
                {"report": report_info})
    click.echo(f"cleaned volume written to {out / 'cleaned.wmk'}")


@main.command()
@click.argument("input_path", type=click.Path(exists=True))
@click.option("--noise-sigma", type=float, default=None,
              help="Known per-channel noise level for CRLB; estimated if omitted.")
@click.pass_obj
def fit(obj, input_path, noise_sigma):
    """Fit each brain-mask spectrum against the metabolite basis."""
    import csv

    from .fitting import basis_from_panel, compute_crlb, fit_spectrum, noise_band_indices
    from .core import spectrum_at

    cfg = _load_config(obj["config_path"], "fit", {"noise_sigma": noise_sigma})
    out = obj["out_dir"]
    vol = read_spectral_volume(input_path)
    basis = basis_from_panel(params=vol.params)
    names = basis.names
    maps = {n: np.zeros(vol.dims) for n in names}
    crlb_maps = {n: np.zeros(vol.dims) for n in names}
    snr_map = np.zeros(vol.dims)
    fwhm_map = np.zeros(vol.dims)
    rows = []
    try:
        for ix, iy, iz in np.argwhere(vol.brain_mask):
            spec = spectrum_at(vol, ix, iy, iz)
            res = fit_spectrum(spec, basis)
            sigma = cfg["fit"]["noise_sigma"]
            if sigma is None:
                noise = spec.bins[noise_band_indices(spec)]
                sigma = float(np.std(np.concatenate([noise.real, noise.imag])))
            crlb = compute_crlb(res, spec, float(sigma))
            for n in names:
                maps[n][ix, iy, iz] = res.amplitudes[n]
                crlb_maps[n][ix, iy, iz] = crlb[n]
            snr_map[ix, iy, iz] = res.snr
            fwhm_map[ix, iy, iz] = res.fwhm_ppm
            rows.append([ix, iy, iz, res.snr, res.fwhm_ppm]
                        + [res.amplitudes[n] for n in names]
                        + [crlb[n] for n in names])
    except Exception as exc:
        _stage_fail("fit", exc)
    out.mkdir(parents=True, exist_ok=True)
    for n in names:
        write_wmk(out / f"amp_{n}.wmk", maps[n][..., None], voxel_mm=vol.voxel_mm)
        write_wmk(out / f"crlb_{n}.wmk", np.nan_to_num(crlb_maps[n])[..., None],
                  voxel_mm=vol.voxel_mm, masks={"mask": np.isfinite(crlb_maps[n])})
    write_wmk(out / "snr.wmk", snr_map[..., None], voxel_mm=vol.voxel_mm)
    write_wmk(out / "fwhm_ppm.wmk", fwhm_map[..., None], voxel_mm=vol.voxel_mm)
    with open(out / "fit_results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ix", "iy", "iz", "snr", "fwhm_ppm"]
                   + [f"amp_{n}" for n in names] + [f"crlb_pct_{n}" for n in names])
        w.writerows(rows)
    with open(out / "fit_meta.json", "w") as fh:
        json.dump({"metabolites": list(names), "n_fitted": len(rows),
                   "noise_sigma": cfg["fit"]["noise_sigma"]},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_meta(out, "fit", cfg, obj["seed"], obj["threads"], obj["t0"],
                {"n_fitted": len(rows)})
    click.echo(f"fit maps written to {out}")


@main.command()
@click.argument("input_path", type=click.Path(exists=True))
@click.option("--n-echoes", type=int, default=None)
@click.option("--iters", type=int, default=None)
@click.pass_obj
def qsm(obj, input_path, n_echoes, iters):
    """Susceptibility mapping from the FID echo train of a WMK volume."""
    from .qsm import fid_volume_to_echoes, qsm_pipeline

    cfg = _load_config(obj["config_path"], "qsm",
                       {"n_echoes": n_echoes, "iters": iters})
    q = cfg["qsm"]
    out = obj["out_dir"]
    vol = read_spectral_volume(input_path)
    mask = vol.brain_mask | vol.skull_mask
    try:
        ev = fid_volume_to_echoes(vol, int(q["n_echoes"]))
        stages = qsm_pipeline(
            ev, mask, b0_tesla=vol.params.field_tesla,
            t2star_ms=float(q["t2star_ms"]),
            quality_threshold=float(q["quality_threshold"]),
            iters=int(q["iters"]), lam=float(q["lam"]),
        )
    except Exception as exc:
        _stage_fail("qsm", exc)
    write_wmk(out / "chi.wmk", stages.chi.chi[..., None], voxel_mm=vol.voxel_mm,
              masks={"mask": stages.chi.mask}, extra=stages.notes)
    write_wmk(out / "rss.wmk", stages.rss[..., None], voxel_mm=vol.voxel_mm)
    write_wmk(out / "unwrapped.wmk", stages.unwrapped, voxel_mm=vol.voxel_mm)
    write_wmk(out / "quality.wmk", stages.quality[..., None], voxel_mm=vol.voxel_mm)
    write_wmk(out / "field.wmk", stages.field.values[..., None],
              voxel_mm=vol.voxel_mm, masks={"mask": stages.field.mask})
    write_wmk(out / "local_field.wmk", stages.local_field.values[..., None],
              voxel_mm=vol.voxel_mm, masks={"mask": stages.local_field.mask})
    _write_meta(out, "qsm", cfg, obj["seed"], obj["threads"], obj["t0"],
                {"notes": stages.notes})
    click.echo(f"susceptibility map written to {out / 'chi.wmk'}")


@main.command()
@click.argument("input_path", type=click.Path(exists=True))
@click.option("--n-echoes", type=int, default=None,
              help="Echoes to take from a complex FID volume input.")
@click.pass_obj
def mwf(obj, input_path, n_echoes):
    """Myelin water fraction map from a multi-echo decay volume."""
    from .mwf import DecayVolume, mwf_pipeline

    cfg = _load_config(obj["config_path"], "mwf", {})
    m = cfg["mwf"]
    out = obj["out_dir"]
    wv = read_wmk(input_path)
    try:
        if np.iscomplexobj(wv.data):
            vol = wv.to_spectral_volume()
            ne = n_echoes or vol.params.n_points
            te = vol.params.te_ms + np.arange(ne) * vol.params.dwell_ms
            decay = DecayVolume(
                magnitude=np.abs(vol.fids[..., :ne]), te_ms=tuple(te.tolist()),
                mask=vol.brain_mask,
            )
        else:
            te = wv.meta.get("te_ms")
            if te is None:
                raise ValueError("magnitude input needs 'te_ms' in header extra")
            mask = wv.masks.get("brain_mask")
            if mask is None:
                mask = np.ones(wv.dims, dtype=bool)
            decay = DecayVolume(magnitude=wv.data, te_ms=tuple(te), mask=mask)
        result = mwf_pipeline(
            decay,
            apply_tukey=bool(m["tukey"]), tukey_alpha=float(m["tukey_alpha"]),
            crop_last_te_ms=m["crop_last_te_ms"],
            apply_rpca=bool(m["rpca"]),
        )
    except Exception as exc:
        _stage_fail("mwf", exc)
    write_wmk(out / "mwf.wmk", np.nan_to_num(result.mwf)[..., None],
              voxel_mm=wv.voxel_mm, masks={"mask": np.isfinite(result.mwf)},
              extra={"stages": list(result.stages_run)})
    pools = {"t2s_fast_ms": result.t2s_fast_ms, "t2s_slow_ms": result.t2s_slow_ms,
             "amp_fast": result.amp_fast, "amp_slow": result.amp_slow}
    for name, data in pools.items():
        write_wmk(out / f"{name}.wmk", np.nan_to_num(data)[..., None],
                  voxel_mm=wv.voxel_mm, masks={"mask": np.isfinite(data)})
    _write_meta(out, "mwf", cfg, obj["seed"], obj["threads"], obj["t0"],
                {"stages": list(result.stages_run)})
    click.echo(f"MWF map written to {out / 'mwf.wmk'}")


@main.command("eval")
@click.option("--est", "est_path", type=click.Path(exists=True), required=True)
@click.option("--ref", "ref_path", type=click.Path(exists=True), required=True)
@click.option("--percentage", is_flag=True, default=None,
              help="Percentage-difference agreement (metabolite maps).")
@click.pass_obj
def eval_cmd(obj, est_path, ref_path, percentage):
    """Agreement of two scalar WMK maps: NRMSE plus Bland-Altman."""
    from .metrics import bland_altman, bland_altman_plot, nrmse

    cfg = _load_config(obj["config_path"], "eval", {
        "est_path": est_path, "ref_path": ref_path, "percentage": percentage,
    })
    e = cfg["eval"]
    out = obj["out_dir"]
    est = read_wmk(e["est_path"])
    ref = read_wmk(e["ref_path"])
    try:
        if est.data.shape != ref.data.shape:
            raise ValueError("est and ref volumes have different shapes")
        mask = ref.masks.get(e["mask_name"])
        if mask is None:
            mask = np.ones(ref.dims, dtype=bool)
        a = np.real(est.data[mask]).ravel()
        b = np.real(ref.data[mask]).ravel()
        score = nrmse(a, b)
        ba = bland_altman(a, b, percentage=bool(e["percentage"]))
    except click.ClickException:
        raise
    except Exception as exc:
        _stage_fail("eval", exc)
    out.mkdir(parents=True, exist_ok=True)
    result = {
        "nrmse_percent": score,
        "bland_altman": {
            "bias": ba.bias, "loa_low": ba.loa_low, "loa_high": ba.loa_high,
            "n": ba.n, "percentage": bool(e["percentage"]),
        },
    }
    with open(out / "eval.json", "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    bland_altman_plot(ba, out / "bland_altman.svg")
    _write_meta(out, "eval", cfg, obj["seed"], obj["threads"], obj["t0"], result)
    click.echo(f"NRMSE {score:.3f}%  bias {ba.bias:.4g} "
               f"[{ba.loa_low:.4g}, {ba.loa_high:.4g}]")


@main.command("export-dataset")
@click.option("--n-pairs", type=int, default=None)
@click.pass_obj
def export_dataset_cmd(obj, n_pairs):
    """Export a training dataset of (x1, x2, y, energy) records."""
    from .phantom import export_dataset

    cfg = _load_config(obj["config_path"], "export_dataset", {"n_pairs": n_pairs})
    d = cfg["export_dataset"]
    out = obj["out_dir"]
    try:
        export_dataset(
            int(d["n_pairs"]), out / "dataset", obj["seed"], params=_acq(cfg),
            n_basis=int(d["n_basis"]), augment=bool(d["augment"]),
        )
    except Exception as exc:
        _stage_fail("export-dataset", exc)
    _write_meta(out, "export-dataset", cfg, obj["seed"], obj["threads"], obj["t0"])
    click.echo(f"dataset written to {out / 'dataset'}")


if __name__ == "__main__":
    main()
