import pytest

from rtdispatch.synthetic import generate_synthetic_city


@pytest.fixture(scope="session")
def small_city(tmp_path_factory):
    """A 9-cell synthetic city with 120 road nodes and 4 depots; returns the config path."""
    out = tmp_path_factory.mktemp("city")
    return generate_synthetic_city(str(out), seed=3, n_nodes=120, n_cells=9, n_depots=4,
                                   n_incidents=80, base_rate=3.0, planner={"b": 3})


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
