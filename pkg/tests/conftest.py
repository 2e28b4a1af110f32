import numpy as np
import pytest
from hypothesis import settings

from ddnn import kernels

settings.register_profile("ddnn", deadline=None, max_examples=60)
settings.load_profile("ddnn")


@pytest.fixture(params=kernels.BACKENDS)
def backend(request):
    prev = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    """A small synthetic dataset split, cheap enough to train on in tests."""
    from ddnn.data import SynthParams, split, synth_generate

    ds = synth_generate(SynthParams(seed=3, n_samples=48))
    return split(ds, 0.75, seed=3)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
