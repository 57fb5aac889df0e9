"""Inference on WMK volumes.

Each voxel carries a time-domain signal x1 and its lipid-space projection x2
in two parallel WMK volumes, the core toolkit's native volume layout.  Per
voxel both are moved to the frequency domain, normalized by E = ||x1 - x2||
(the same normalization used when the training records were exported), fed
through the network, and the predicted nuisance spectrum is scaled back by E
and returned to the time domain.  Output: a ``y.wmk`` volume ready for the
core's subtract-file path plus an ``energies.wmk`` volume for bookkeeping.
"""

from __future__ import annotations

import numpy as np
import torch

from .data import read_wmk, write_wmk
from .model import channels_to_complex, complex_to_channels
from .train import load_checkpoint


def fids_to_bins(samples: np.ndarray) -> np.ndarray:
    """Unitary time -> frequency transform along the last axis, ascending ppm."""
    n = samples.shape[-1]
    return np.fft.fftshift(np.fft.fft(samples, axis=-1), axes=-1) / np.sqrt(n)


def bins_to_fids(bins: np.ndarray) -> np.ndarray:
    n = bins.shape[-1]
    return np.fft.ifft(np.fft.ifftshift(bins, axes=-1), axis=-1) * np.sqrt(n)


def predict_records(model, x1: np.ndarray, x2: np.ndarray,
                    batch_size: int = 256) -> np.ndarray:
    """(records, n) complex x1/x2 -> (records, n) complex y.

    Inputs are expected already normalized (||x1 - x2|| = 1 per record).
    """
    if x1.shape != x2.shape or x1.ndim != 2:
        raise ValueError("x1 and x2 must be matching (records, n) arrays")
    outs = []
    model.eval()
    with torch.no_grad():
        for start in range(0, x1.shape[0], batch_size):
            sl = slice(start, start + batch_size)
            pred = model(complex_to_channels(x1[sl]), complex_to_channels(x2[sl]))
            outs.append(channels_to_complex(pred))
    return np.concatenate(outs, axis=0)


def predict_volume(checkpoint_path, x1_wmk, x2_wmk, out_dir,
                   mask_name: str = "brain_mask"):
    """Predict the nuisance volume y from x1/x2 WMK volumes.

    Returns (y_path, energies_path).  Voxels outside the mask (or with zero
    pair energy) get y = 0, which makes the core's subtract step a no-op
    there.
    """
    from pathlib import Path

    model, blob = load_checkpoint(checkpoint_path)
    n_ckpt = int(blob["n_points"])
    x1, header, masks = read_wmk(x1_wmk)
    x2, header2, _ = read_wmk(x2_wmk)
    if x1.shape != x2.shape:
        raise ValueError("x1 and x2 volumes have different shapes")
    if x1.shape[3] != n_ckpt:
        raise ValueError(
            f"volume has {x1.shape[3]} spectral points, checkpoint expects {n_ckpt}"
        )
    dims = x1.shape[:3]
    mask = masks.get(mask_name)
    if mask is None:
        mask = np.ones(dims, dtype=bool)

    # unitary transform preserves norms, so E is the same in either domain
    energy = np.linalg.norm(x1 - x2, axis=3)
    active = mask & (energy > 0)
    y = np.zeros_like(x1)
    if np.any(active):
        e = energy[active][:, None]
        b1 = fids_to_bins(x1[active]) / e
        b2 = fids_to_bins(x2[active]) / e
        pred = predict_records(model, b1, b2)
        y[active] = bins_to_fids(pred * e)

    out_dir = Path(out_dir)
    acquisition = header.get("acquisition")
    y_path = write_wmk(out_dir / "y.wmk", y, header["voxel_mm"],
                       acquisition=acquisition,
                       masks={mask_name: mask} if mask_name in masks else None)
    energies_path = write_wmk(out_dir / "energies.wmk",
                              np.where(mask, energy, 0.0)[..., None],
                              header["voxel_mm"])
    return y_path, energies_path
