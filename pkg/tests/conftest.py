import time

import pytest

from guidedpurify.benchmark import build_toy_stack, run_toy_benchmark


@pytest.fixture(scope="session")
def toy_stack():
    """Trained toy denoiser plus base and fine-tuned classifiers (about 20 s on one CPU)."""
    start = time.perf_counter()
    stack = build_toy_stack()
    stack.build_seconds = time.perf_counter() - start
    return stack


@pytest.fixture(scope="session")
def toy_reports(toy_stack):
    """Undefended / unguided / guided reports on the shared subset (a few minutes on one CPU)."""
    return run_toy_benchmark(toy_stack)


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail=""):
    """Collect one line per acceptance criterion for the terminal summary."""
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(items):
    for item in items:
        if {"toy_stack", "toy_reports"} & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)
