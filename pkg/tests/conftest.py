import pytest

from metaprune import tensorcore as tc

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"[acceptance {number:>2}] {'PASS' if passed else 'FAIL'} {name}: {detail}"
    _ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="session")
def acceptance_report():
    return record_acceptance


def pytest_configure(config):
    tc.configure_threads(1)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
