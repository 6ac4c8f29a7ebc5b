import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


class CriterionRecorder:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def __init__(self, lines):
        self._lines = lines

    def record(self, label: str, ok: bool, detail: str) -> None:
        self._lines.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        print(self._lines[-1])


@pytest.fixture
def criterion(request):
    return CriterionRecorder(request.config.stash[_CRITERIA])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1][1:].rstrip(":"))):
            terminalreporter.write_line(line)
