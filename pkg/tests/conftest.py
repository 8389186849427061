import warnings

import numpy as np
import pytest

from fedsfr.channel import ChannelConfig, Constellation
from fedsfr.model import ModelConfig, init_model

# small configs trigger the eta_s0 >= eta_c0 advisory on purpose in a few tests
warnings.filterwarnings("ignore", message="eta_s0 >= eta_c0")


@pytest.fixture
def desk_cfg():
    return ModelConfig()


@pytest.fixture
def tiny_cfg():
    return ModelConfig(image_shape=(1, 2, 2), N=2, d=2, hidden_widths=(3,), M=4)


@pytest.fixture
def qam16():
    return Constellation.qam(16)


@pytest.fixture
def desk_params(desk_cfg):
    return init_model(desk_cfg, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def noisy():
    return ChannelConfig(20.0)


@pytest.fixture
def clean():
    return ChannelConfig(float("inf"))


_RUNS = {}


def desk_run(seed, **overrides):
    """Metrics of a full desk experiment, memoized across the test session."""
    from fedsfr.config import ExperimentConfig
    from fedsfr.federation import run_experiment_state

    key = (seed, tuple(sorted(overrides.items())))
    if key not in _RUNS:
        _RUNS[key] = run_experiment_state(ExperimentConfig(seed=seed, **overrides))
    return _RUNS[key]


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
