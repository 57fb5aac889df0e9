import numpy as np
import pytest

from wumrsi.core import AcquisitionParams, Fid


@pytest.fixture
def params():
    return AcquisitionParams()


@pytest.fixture
def fine_params():
    # fine frequency grid for linewidth measurements
    return AcquisitionParams(n_points=4096)


def lorentzian_fid(params, amp, freq_hz, damping_hz, phase=0.0):
    t = params.time_axis_s()
    return Fid(amp * np.exp(1j * phase) * np.exp((2j * np.pi * freq_hz - damping_hz) * t),
               params)
