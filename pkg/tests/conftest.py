import numpy as np
import pytest

from spatial_bma.filtering import build_filter_set
from spatial_bma.synthetic import capitals, make_sar_data, standard_menu
from spatial_bma.weights import GeoPoint, NeighborList, row_standardize


def ring_list(n: int) -> NeighborList:
    """Cycle graph on n units with binary links to both adjacent units."""
    ids = tuple(f"u{i}" for i in range(n))
    entries = tuple((((i - 1) % n, 1.0), ((i + 1) % n, 1.0)) for i in range(n))
    return NeighborList(ids, entries, "queen-file")


def ring_matrix(n: int):
    return row_standardize(ring_list(n), f"ring{n}")


@pytest.fixture(scope="session")
def points():
    return capitals()


@pytest.fixture(scope="session")
def menu(points):
    return standard_menu(points)


@pytest.fixture(scope="session")
def sar_fixture(menu):
    """k=8 covariates, 3 true, rho=0.6, generated under 8NN."""
    return make_sar_data(menu["8nn"], k=8, n_true=3, rho=0.6, beta=1.0, sigma=0.5, seed=0)


@pytest.fixture(scope="session")
def fixture_filters(sar_fixture, menu):
    d = sar_fixture
    return {name: build_filter_set(d.y, d.X, W, name) for name, W in menu.items()}


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(12345))


@pytest.fixture
def meridian_points():
    return [GeoPoint("a", 0.0, 10.0), GeoPoint("b", 1.0, 10.0), GeoPoint("c", 2.0, 10.0)]


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
