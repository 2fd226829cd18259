import re

import pytest

_DETAILS: dict[int, str] = {}


@pytest.fixture
def record():
    """Store a one-line measurement summary for an acceptance criterion."""

    def _record(number: int, detail: str) -> None:
        _DETAILS[number] = detail
        print(f"criterion {number}: {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if m and (rep.when == "call" or key != "passed"):
                n = int(m.group(1))
                outcomes[n] = "PASS" if key == "passed" and outcomes.get(n, "PASS") == "PASS" else "FAIL"
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcomes):
        detail = _DETAILS.get(n, "no measurement recorded")
        terminalreporter.write_line(f"[{outcomes[n]}] criterion {n}: {detail}")
