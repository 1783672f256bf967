import numpy as np
import pytest

from gradcodec import mcsim


@pytest.fixture(scope="session")
def lognormal_1e5():
    """Signed lognormal(0, 3^2) sample shared by the fitting tests."""
    return mcsim.sample_lognormal(mcsim.SimConfig(sigma=3.0, n=100_000, seed=11, signed=True))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda s: (int(s.split()[0]), s)):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"criterion {name}: {'PASS' if ok else 'FAIL'}  {detail}")
