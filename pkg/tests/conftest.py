import pytest

_verdicts: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion; echoed live and in the run summary."""
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        print(line)
        _verdicts.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_verdicts, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
