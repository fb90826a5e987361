import pytest

from cogarch_pbef.levy import Theta, VarianceGamma, CompoundPoissonNormal
from cogarch_pbef.moments import build_jtable, build_moment_cache

THETA0 = Theta(0.04, 0.053, 0.038)


@pytest.fixture(scope="session")
def vg():
    return VarianceGamma(C=1.0)


@pytest.fixture(scope="session")
def cpn():
    return CompoundPoissonNormal(rate=1.0)


@pytest.fixture(scope="session")
def theta0():
    return THETA0


@pytest.fixture(scope="session")
def jt(vg, theta0):
    return build_jtable(vg, theta0, 4)


@pytest.fixture(scope="session")
def cache(vg, theta0, jt):
    return build_moment_cache(vg, theta0, 4, jtable=jt)


ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 8


@pytest.fixture
def acceptance(request):
    """Record ``(passed, detail)`` for an acceptance criterion, shown in the terminal summary."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number, passed, detail):
        results[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, None)
    if results is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        passed, detail = results.get(n, (False, "not run or errored before reporting"))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
