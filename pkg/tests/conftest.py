from types import SimpleNamespace

import numpy as np
import pytest


def make_data(A, Y, W=None):
    A = np.asarray(A)
    W = np.zeros((len(A), 0)) if W is None else np.asarray(W, dtype=float).reshape(len(A), -1)
    return SimpleNamespace(A=A, Y=np.asarray(Y, dtype=float), W=W)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
