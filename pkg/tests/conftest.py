import numpy as np
import pytest

ACCEPTANCE = {}  # criterion number -> (title, passed, detail)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def criterion(request):
    """Records one acceptance verdict; a test that errors out is logged as FAIL."""
    n, title = request.node.get_closest_marker("criterion").args
    verdict = {}

    def report(passed, detail):
        verdict.update(passed=bool(passed), detail=detail)
        print(f"criterion {n} {'PASS' if passed else 'FAIL'}: {title}: {detail}")

    yield report
    ACCEPTANCE[n] = (title, verdict.get("passed", False), verdict.get("detail", "did not complete"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n}. {title}: {detail}")
