import warnings

import numpy as np
import pytest
import torch

from dyneformer.data import GeneratorConfig, generate_synthetic_dataset, prepare_windows

torch.set_num_threads(1)

ACCEPTANCE_RESULTS = {}


def record(criterion, passed, detail):
    ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


SMALL = dict(devices=10, days=20, seed=3)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic_dataset(GeneratorConfig(**SMALL))


@pytest.fixture(scope="session")
def small_prepared(small_dataset):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return prepare_windows(small_dataset)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
