import numpy as np
import pytest

from scot.citydata import CityGraph, TripTable, build_mobility


def make_city(adjacency, trips=(), city_id="c", labels=None):
    adjacency = np.asarray(adjacency, dtype=float)
    n = adjacency.shape[0]
    table = TripTable.from_records(trips)
    return CityGraph(city_id, adjacency, build_mobility(table, n), labels or {}, table)


def random_city(rng, n, p=0.4, city_id="c"):
    A = (rng.random((n, n)) < p).astype(float)
    A = np.triu(A, 1)
    A = A + A.T
    trips = [(i, int(j), int(rng.integers(1, 9))) for i in range(n) for j in rng.choice(n, min(2, n), replace=False)]
    return make_city(A, trips, city_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
