import pytest

from umpfssl.data import PartitionSpec, build_clients, generate_synthetic


@pytest.fixture
def small_data():
    return generate_synthetic(class_count=4, per_class=40, cluster_spread=0.35, seed=3)


@pytest.fixture
def small_clients(small_data):
    return build_clients(small_data, PartitionSpec(client_count=6, alpha=0.5, seed=3))


_criterion_lines = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and returns ``ok``."""
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _criterion_lines.append((number, line))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_criterion_lines):
            terminalreporter.write_line(line)
