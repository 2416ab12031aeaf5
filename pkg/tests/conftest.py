import dataclasses

import numpy as np
import pytest
import torch

from stainstyle.data import RUIFROK_HE, StainStyleParams, default_styles, synth_tile

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def styles():
    return default_styles()


@pytest.fixture(scope="session")
def clean_style():
    return StainStyleParams(RUIFROK_HE, np.array([1.0, 1.0]), 0.95, 0.0)


@pytest.fixture
def tile(styles):
    return synth_tile(styles[0], 1, 64, 7).tile


def noiseless(style):
    return dataclasses.replace(style, noise_sigma=0.0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
