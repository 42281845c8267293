import pytest
import torch

from cifkit.numcore import set_strict

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def strict_numerics():
    set_strict(True)
    yield
    set_strict(False)


@pytest.fixture(autouse=True)
def no_grad_leak():
    # tests must not leave global grad mode disabled
    yield
    torch.set_grad_enabled(True)


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and return the flag."""

    def record(criterion: int, passed: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
