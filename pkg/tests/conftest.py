import textwrap

import numpy as np
import pytest

from mvsde.kernels import linear, loglip
from mvsde.paths import TimeGrid


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def linear_kernel():
    return linear(a=-1.0, c=0.5, s=0.2)


@pytest.fixture
def loglip_kernel():
    return loglip()


@pytest.fixture
def small_grid():
    return TimeGrid(1.0, 64)


@pytest.fixture
def write_config(tmp_path):
    """Write an INI body to a file under tmp_path and return its path."""

    def write(body, name="experiment.ini"):
        path = tmp_path / name
        path.write_text(textwrap.dedent(body))
        return path

    return write
