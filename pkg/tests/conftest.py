import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from faircert.nn import ModelParams  # noqa: E402

settings.register_profile("faircert", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("faircert")


@pytest.fixture
def net_2x16():
    return ModelParams.init([6, 16, 16, 2], seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_net(rng, sizes, scale=1.0):
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers.append((scale * rng.normal(0, np.sqrt(2.0 / a), (b, a)), 0.1 * rng.normal(size=b)))
    return ModelParams(layers)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
