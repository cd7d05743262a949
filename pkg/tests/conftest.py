from __future__ import annotations

import numpy as np
import pytest
import torch

from djescc.imagedata import load_dataset
from djescc.models import Architecture, ModelBundle
from djescc.training import ExperimentConfig

_VERDICTS: list[tuple[int, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.outcome == "passed" else "FAIL"
        _VERDICTS.append((mark.args[0], mark.args[1], status))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status in sorted(_VERDICTS):
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")


TINY = dict(t=2, encoder_widths=(4, 4, 4, 4), unet_width=4)


@pytest.fixture
def tiny_arch():
    return Architecture(**TINY)


@pytest.fixture
def tiny_bundle(tiny_arch):
    return ModelBundle(tiny_arch, seed=0)


@pytest.fixture
def tiny_cfg():
    return ExperimentConfig(dataset="photos32", train_count=16, test_count=8, epochs=2,
                            batch_size=8, log_feature_losses=False, eval_snrs=(0.0, 20.0),
                            eval_repeats=2, **TINY)


@pytest.fixture(scope="session")
def photos_train():
    return load_dataset("photos32", "train", count=16)


@pytest.fixture(scope="session")
def photos_test():
    return load_dataset("photos32", "test", count=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def torch_gen():
    return torch.Generator().manual_seed(0)
