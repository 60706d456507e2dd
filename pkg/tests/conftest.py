import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from affordground.config import tiny_config
from affordground.data import DataConfig, make_splits

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config(epochs=2, batch_size=4)


@pytest.fixture(scope="session")
def tiny_splits(tiny_cfg):
    # two samples per pair keeps every split non-empty at N = 64
    cfg = DataConfig(n_points=tiny_cfg.n_points, samples_per_pair=2, test_per_pair=1, n_classes=14)
    return make_splits(cfg, seed=7)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n not in module.RESULTS:
            terminalreporter.write_line(f"criterion {n:>2}: NOT RUN (deselected or errored before measuring)")
            continue
        ok, detail = module.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
