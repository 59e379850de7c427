from pathlib import Path

import pytest

from convexvolt import fixtures
from convexvolt.grid import load_network


@pytest.fixture(scope="session")
def feeder10():
    return load_network(fixtures.path("feeder10"))


@pytest.fixture(scope="session")
def feeder33():
    return load_network(fixtures.path("feeder33"))


@pytest.fixture(scope="session")
def feeder4():
    return load_network(fixtures.path("feeder4"))


@pytest.fixture
def write(tmp_path: Path):
    def _write(name: str, text: str) -> Path:
        path = tmp_path / name
        path.write_text(text)
        return path

    return _write


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one acceptance line; printed in the terminal summary."""
    def _report(number: int, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}")
        print(ACCEPTANCE_LINES[-1])

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
