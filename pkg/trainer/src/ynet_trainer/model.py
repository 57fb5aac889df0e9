"""1-D Y-net: two encoders, one decoder, per-level skip concatenation.

Spectra enter as 2-channel (real, imaginary) sequences.  Each encoder block
is two kernel-3 convolutions with PReLU activations; the channel count
doubles after every pooling step and halves on the way up.  The decoder
upsamples by nearest neighbour and concatenates the same-level features of
both encoders before its block.  A final kernel-1 convolution maps back to
2 channels (real, imaginary of the predicted nuisance spectrum).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class YNetConfig:
    levels: int = 4
    base_channels: int = 16
    kernel: int = 3
    final_kernel: int = 1
    out_channels: int = 2
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    lr_schedule: str = "cosine"  # annealed to ~0 over the epoch budget
    val_fraction: float = 0.1
    merge: str = "concat"  # how both encoders feed each decoder level

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.kernel % 2 != 1 or self.final_kernel % 2 != 1:
            raise ValueError("kernels must be odd so lengths are preserved")
        if self.merge not in ("concat", "sum"):
            raise ValueError("merge must be 'concat' or 'sum'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


def _block(in_ch: int, out_ch: int, kernel: int) -> nn.Sequential:
    pad = kernel // 2
    return nn.Sequential(
        nn.Conv1d(in_ch, out_ch, kernel, padding=pad),
        nn.PReLU(out_ch),
        nn.Conv1d(out_ch, out_ch, kernel, padding=pad),
        nn.PReLU(out_ch),
    )


class _Encoder(nn.Module):
    def __init__(self, cfg: YNetConfig):
        super().__init__()
        self.blocks = nn.ModuleList()
        ch_in = 2
        for lvl in range(cfg.levels):
            ch_out = cfg.base_channels * 2**lvl
            self.blocks.append(_block(ch_in, ch_out, cfg.kernel))
            ch_in = ch_out

    def forward(self, x):
        feats = []
        for i, block in enumerate(self.blocks):
            if i:
                x = F.max_pool1d(x, 2)
            x = block(x)
            feats.append(x)
        return feats


class YNet1d(nn.Module):
    def __init__(self, cfg: YNetConfig = YNetConfig()):
        super().__init__()
        self.cfg = cfg
        self.enc1 = _Encoder(cfg)
        self.enc2 = _Encoder(cfg)
        top = cfg.base_channels * 2 ** (cfg.levels - 1)
        bottom_in = 2 * top if cfg.merge == "concat" else top
        self.connect = _block(bottom_in, 2 * top, cfg.kernel)
        self.dec_blocks = nn.ModuleList()
        ch = 2 * top
        for lvl in reversed(range(cfg.levels)):
            skip = cfg.base_channels * 2**lvl
            skip_ch = 2 * skip if cfg.merge == "concat" else skip
            self.dec_blocks.append(_block(ch + skip_ch, skip, cfg.kernel))
            ch = skip
        self.final = nn.Conv1d(ch, cfg.out_channels, cfg.final_kernel,
                               padding=cfg.final_kernel // 2)

    @property
    def pool_stride(self) -> int:
        return 2 ** (self.cfg.levels - 1)

    def _merge(self, a, b):
        return torch.cat([a, b], dim=1) if self.cfg.merge == "concat" else a + b

    def forward(self, x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
        """(batch, 2, n) + (batch, 2, n) -> (batch, out_channels, n)."""
        if x1.shape != x2.shape or x1.dim() != 3 or x1.shape[1] != 2:
            raise ValueError("inputs must be matching (batch, 2, n) tensors")
        n = x1.shape[2]
        # pad to a pooling-friendly length, crop the output back
        mult = 2 ** (self.cfg.levels - 1)
        pad = (-n) % mult
        if pad:
            x1 = F.pad(x1, (0, pad))
            x2 = F.pad(x2, (0, pad))
        f1 = self.enc1(x1)
        f2 = self.enc2(x2)
        x = self.connect(self._merge(f1[-1], f2[-1]))
        for i, block in enumerate(self.dec_blocks):
            lvl = self.cfg.levels - 1 - i
            if i:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, self._merge(f1[lvl], f2[lvl])], dim=1))
        out = self.final(x)
        return out[..., :n]


def build_network(cfg: YNetConfig = YNetConfig()) -> YNet1d:
    return YNet1d(cfg)


def complex_to_channels(a) -> torch.Tensor:
    """(records, n) complex array -> (records, 2, n) float tensor."""
    import numpy as np

    a = np.asarray(a)
    stacked = np.stack([a.real, a.imag], axis=1).astype("float32")
    return torch.from_numpy(stacked)


def channels_to_complex(t: torch.Tensor):
    """(records, 2, n) float tensor -> (records, n) complex array."""
    a = t.detach().cpu().numpy()
    return a[:, 0, :] + 1j * a[:, 1, :]
