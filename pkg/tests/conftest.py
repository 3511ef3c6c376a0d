import pytest

from vitssl.config import load_preset
from vitssl.runner import run_experiment

# one verdict line per acceptance criterion, echoed again in the terminal summary
CRITERION_LINES: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    """Print and remember a PASS/FAIL line; returns the verdict for asserting."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        CRITERION_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERION_LINES):
            terminalreporter.write_line(CRITERION_LINES[number])


@pytest.fixture(scope="session")
def positive_run(tmp_path_factory):
    """The shipped positive-gap reconstruction preset, run to convergence once."""
    return run_experiment(load_preset("theorem42-positive"), tmp_path_factory.mktemp("positive"))


@pytest.fixture(scope="session")
def cl_run(tmp_path_factory):
    """The shipped contrastive preset, run to its gradient-norm checkpoint once."""
    return run_experiment(load_preset("theorem43-cl"), tmp_path_factory.mktemp("contrastive"))
