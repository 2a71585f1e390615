import copy

import numpy as np
import pytest

from hydroneuro.model import build_model

BASE = {
    "epsilon": 0.1,
    "alpha": 0.5,
    "a": {"preset": "cosine", "c": 1.0, "kappa": 0.5},
    "b": {"preset": "gaussian", "c": 1.0, "sigma": 0.3},
    "phi": {"preset": "linear", "slope": 1.0, "clamp": 2.0},
    "psi0": {"preset": "uniform", "R0": 1.0},
}


def model_cfg(**over):
    cfg = copy.deepcopy(BASE)
    for key, val in over.items():
        cfg[key] = val
    return cfg


def make_model(**over):
    return build_model(model_cfg(**over))


@pytest.fixture
def spec():
    return make_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
