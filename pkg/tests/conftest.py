import sys

import numpy as np
import pytest

from drip import network
from drip.network import Conv2d, Dense, MaxPool, NetworkSpec, ReLU


def tiny_spec(channels=1, size=6, classes=3, tap=None):
    return NetworkSpec(
        (channels, size, size),
        (Conv2d(3, 3, padding=1), ReLU(), MaxPool(2), Conv2d(4, 3, stride=1, padding=1), ReLU(), Dense(classes)),
        classes,
        tap,
    )


def random_model(spec, seed, scale=1.0):
    """Seeded init with non-zero biases so every parameter matters."""
    rng = np.random.default_rng(seed)
    params = []
    for p in network.initialize(spec, seed).parameters:
        if p:
            w, b = p
            params.append((w * scale * 2.0, rng.normal(0.0, 0.1, b.shape)))
        else:
            params.append(())
    return network.TrainedModel(spec, tuple(params), seed, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
