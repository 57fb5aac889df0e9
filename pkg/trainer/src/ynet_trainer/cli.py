"""Minimal command-line front end: train on a dataset, predict on volumes."""

from __future__ import annotations

import logging

import click

from .model import YNetConfig


@click.group()
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def main(ctx, seed):
    """Y-net nuisance-spectrum trainer (file-coupled to the core toolkit)."""
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed


@main.command("train")
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--epochs", type=int, default=200, show_default=True)
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--learning-rate", type=float, default=1e-3, show_default=True)
@click.pass_obj
def train_cmd(obj, dataset_dir, out_dir, epochs, batch_size, learning_rate):
    from .train import train

    cfg = YNetConfig(epochs=epochs, batch_size=batch_size,
                     learning_rate=learning_rate)
    ckpt, state = train(dataset_dir, cfg, out_dir=out_dir, seed=obj["seed"])
    click.echo(f"best val loss {state.best_val:.4e} at epoch {state.best_epoch}; "
               f"checkpoint {ckpt}")


@main.command("predict")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.option("--x1", "x1_wmk", type=click.Path(exists=True), required=True)
@click.option("--x2", "x2_wmk", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), default="out")
def predict_cmd(checkpoint, x1_wmk, x2_wmk, out_dir):
    from .predict import predict_volume

    y_path, energies_path = predict_volume(checkpoint, x1_wmk, x2_wmk, out_dir)
    click.echo(f"nuisance volume written to {y_path} (energies: {energies_path})")


if __name__ == "__main__":
    main()
