"""Training loop: Adam on an MSE nuisance-regression objective.

The validation split is held out by record index (tail of the file) so a
re-exported dataset with the same seed reproduces the same split.  The
checkpoint with the best validation loss is kept.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetError, load_dataset, split_by_record_index
from .model import YNetConfig, build_network, complex_to_channels

log = logging.getLogger(__name__)


@dataclass
class TrainState:
    epoch: int = 0
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_val: float = float("inf")
    best_epoch: int = -1
    checkpoint_path: str = ""


def _mse(model, x1, x2, y):
    pred = model(x1, x2)
    return torch.mean((pred - y) ** 2)


def save_checkpoint(path, model, cfg: YNetConfig, n_points: int,
                    acquisition=None, state: TrainState | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "state_dict": model.state_dict(),
            "config": dataclasses.asdict(cfg),
            "n_points": int(n_points),
            "acquisition": acquisition,
            "state": dataclasses.asdict(state) if state else None,
        },
        path,
    )
    return path


def load_checkpoint(path):
    """Load a checkpoint -> (model in eval mode, checkpoint dict)."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = YNetConfig(**blob["config"])
    model = build_network(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob


def train(
    dataset_dir,
    cfg: YNetConfig = YNetConfig(),
    out_dir=None,
    seed: int = 0,
    device: str = "cpu",
):
    """Train on an exported dataset; returns (checkpoint_path, TrainState).

    The checkpoint written is the one with the lowest validation loss.
    """
    x1, x2, y, _, manifest = load_dataset(dataset_dir)
    n_points = int(manifest["n_points"])
    count = x1.shape[0]
    train_idx, val_idx = split_by_record_index(count, cfg.val_fraction)

    torch.manual_seed(seed)
    model = build_network(cfg).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                           betas=(0.9, 0.999))
    sched = None
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)

    tx1 = complex_to_channels(x1).to(device)
    tx2 = complex_to_channels(x2).to(device)
    ty = complex_to_channels(y).to(device)

    out_dir = Path(out_dir) if out_dir else Path(dataset_dir) / "run"
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "best.pt"
    state = TrainState(checkpoint_path=str(ckpt))
    rng = np.random.default_rng(seed)

    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = _mse(model, tx1[sel], tx2[sel], ty[sel])
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        if sched is not None:
            sched.step()
        model.eval()
        with torch.no_grad():
            vloss = float(_mse(model, tx1[val_idx], tx2[val_idx], ty[val_idx]))
        state.epoch = epoch + 1
        state.train_loss.append(float(np.mean(losses)))
        state.val_loss.append(vloss)
        if vloss < state.best_val:
            state.best_val = vloss
            state.best_epoch = epoch
            save_checkpoint(ckpt, model, cfg, n_points,
                            acquisition=manifest.get("acquisition"), state=state)
        if epoch % max(1, cfg.epochs // 10) == 0:
            log.info("epoch %d: train %.3e val %.3e", epoch,
                     state.train_loss[-1], vloss)

    with open(out_dir / "train_state.json", "w") as fh:
        json.dump(dataclasses.asdict(state), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ckpt, state
