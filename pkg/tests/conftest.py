import sys

import numpy as np
import pytest

from dmtkit.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return ModelConfig(L=2, d=16, heads=2, ffn_hidden=24, K=3, C=8)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda l: int(l.split(":")[0].split()[1])):
        terminalreporter.write_line(line)
