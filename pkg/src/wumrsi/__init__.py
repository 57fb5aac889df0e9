"""Water-unsuppressed MRSI processing: nuisance removal, fitting, QSM, MWF."""

__version__ = "0.1.0"

from .core import (
    AcquisitionParams,
    AxisMismatchError,
    Fid,
    SpectralVolume,
    Spectrum,
    fid_to_spectrum,
    spectrum_to_fid,
)
from .wmk import WmkError, WmkVolume, read_wmk, write_wmk

__all__ = [
    "AcquisitionParams",
    "AxisMismatchError",
    "Fid",
    "Spectrum",
    "SpectralVolume",
    "fid_to_spectrum",
    "spectrum_to_fid",
    "WmkError",
    "WmkVolume",
    "read_wmk",
    "write_wmk",
    "__version__",
]
