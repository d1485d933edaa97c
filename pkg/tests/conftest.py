import numpy as np
import pytest

from qapnet.data import SplitSpec, fit_standardizer, split, synth_generate


@pytest.fixture(scope="session")
def small_task():
    """Standardized 3-class Gaussian task, small enough for quick training."""
    d = synth_generate(1500, 6, 3, 5.0, seed=11)
    tr, va, te = split(d, SplitSpec(0.6, 0.2, 0.2, seed=3))
    std = fit_standardizer(tr)
    return tuple(std.apply(x) for x in (tr, va, te))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# lines recorded by the acceptance suite, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
