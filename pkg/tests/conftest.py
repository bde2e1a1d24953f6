import numpy as np
import pytest

from hrmhmc.experiments import build_model

_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line: ``record_criterion(label, passed, detail)``."""
    def record(label: str, passed: bool, detail: str = "") -> None:
        _RESULTS.append((label, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in sorted(_RESULTS, key=lambda r: _order(r[0])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  {detail}")


def _order(label: str):
    head = label.split()[0].rstrip(".:")
    return (int(head), label) if head.isdigit() else (99, label)


@pytest.fixture(scope="session")
def models():
    """One instance of every benchmark model on its default synthetic data."""
    return {name: build_model(name) for name in ("gaussian", "funnel", "horseshoe",
                                                 "sv", "negbin")}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
