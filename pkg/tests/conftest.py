import pytest

from trajgraph.synthetic import constant_velocity_scenes

ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def smoke_scenes():
    return constant_velocity_scenes(16, seed=0)


class Criterion:
    """Records one PASS/FAIL line; any exception inside the block counts as FAIL."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "FAIL" if exc_type else "PASS"
        detail = self.detail or (f"{exc_type.__name__}: {exc}" if exc_type else "")
        line = f"{status} criterion {self.number:>2} {self.title}" + (f" | {detail}" if detail else "")
        ACCEPTANCE.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
