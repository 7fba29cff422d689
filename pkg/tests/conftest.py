import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from swmkit.codec import compress
from swmkit.patterns import generate_pattern_space, uniform_assignment
from swmkit.shared_training import TrainConfig, build_mask_schedule, train_shared_sequence
from swmkit.tensor_nn import make_synthetic_dataset, toy_network

# pattern ids (in the default 44-pattern library) of the reference 3-model set
REFERENCE_IDS = (1, 16, 31)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def library44():
    return generate_pattern_space((3, 3), 44, seed=0)


@pytest.fixture(scope="session")
def dataset():
    return make_synthetic_dataset(0, 4, 80)


@pytest.fixture(scope="session")
def trained(library44, dataset):
    """The reference three-model shared-weight set, highest sparsity first."""
    net = toy_network(4)
    ids = sorted(REFERENCE_IDS, key=lambda i: -library44[i].sparsity())
    schedule = build_mask_schedule(net, [uniform_assignment(net, library44, i) for i in ids], library44)
    models, report = train_shared_sequence(net, schedule, dataset, TrainConfig(epochs=5, seed=0))
    return {"net": net, "schedule": schedule, "models": models, "report": report, "ids": ids}


@pytest.fixture(scope="session")
def bundle(trained):
    return compress(trained["models"])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
