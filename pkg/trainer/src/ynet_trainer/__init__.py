"""Y-net trainer for nuisance-spectrum prediction.

Coupled to the core toolkit exclusively through files: exported dataset
directories (manifest.json + pairs.bin) for training, WMK volumes for
prediction input/output.
"""

from .model import YNetConfig, YNet1d, build_network
from .data import load_dataset
from .train import TrainState, train
from .predict import predict_volume

__version__ = "0.1.0"

__all__ = [
    "YNetConfig",
    "YNet1d",
    "build_network",
    "load_dataset",
    "TrainState",
    "train",
    "predict_volume",
]
