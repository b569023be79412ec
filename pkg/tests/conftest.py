import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from ddflow.synth import PhantomConfig, generate_dataset

settings.register_profile("ddflow", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ddflow")
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_cases():
    """Three default-size phantoms shared across modules."""
    return generate_dataset(PhantomConfig(), 3, np.random.default_rng(99))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """criterion number -> (passed, detail), printed at the end of the run."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        ok, detail = log[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
