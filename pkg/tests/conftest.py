import time
from typing import NamedTuple

import numpy as np
import pytest

from fastscnn.data_io import synth_samples
from fastscnn.model import build
from fastscnn.train import TrainConfig, train_loop

# The global-feature grid of a 128x256 input is 4x8, so the pyramid bins must
# stop at 4; everything else is the default architecture.
TOY = dict(num_classes=3, input_h=128, input_w=256, ppm_bins=(1, 2, 3, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_train():
    return synth_samples(3, (128, 256), 4, seed=0)


@pytest.fixture(scope="session")
def toy_val():
    return synth_samples(3, (128, 256), 4, seed=1)


# One line per acceptance criterion, printed at the end of the session.
ACCEPTANCE_LINES: list[str] = []


class ToyRun(NamedTuple):
    model: object
    records: list
    seconds: float


@pytest.fixture(scope="session")
def toy_trained(toy_train):
    """Model trained 500 iterations on the toy set, its loss records and wall time."""
    t0 = time.perf_counter()
    model = build(train=True, seed=0, **TOY)
    records = train_loop(model, toy_train, TrainConfig(epochs=250, batch_size=2, seed=0), max_iters=500)
    return ToyRun(model, records, time.perf_counter() - t0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
