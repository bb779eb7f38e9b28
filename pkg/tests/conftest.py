import pytest

from helpers import exact_msd_triple, small_triple
from nidapbc.control import ClosedLoop
from nidapbc.plant import make_plant


@pytest.fixture
def exact_msd():
    plant, tri = exact_msd_triple()
    return ClosedLoop(plant, tri)


@pytest.fixture(params=["msd", "double_pendulum", "cartpole"])
def benchmark(request):
    return make_plant(request.param)


@pytest.fixture
def random_loop(benchmark):
    return ClosedLoop(benchmark, small_triple(benchmark, seed=3))



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
