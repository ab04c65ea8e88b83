"""Shared pytest plumbing: acceptance criterion timing and reporting.

Each acceptance test wraps its body in ``criterion(name, budget_s)``;
the context manager times the block, enforces the runtime budget, and
records one ``[PASS]``/``[FAIL]`` line that is echoed both immediately
and in a summary section at the end of the run.
"""

from __future__ import annotations

import time

import pytest

_LINES: list[str] = []


class _Criterion:
    def __init__(self, name: str, budget_s: float | None = None):
        self.name = name
        self.budget_s = budget_s
        self._t0 = 0.0

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self._t0
        if exc_type is not None:
            line = f"[FAIL] {self.name} ({elapsed:.1f}s)"
        elif self.budget_s is not None and elapsed > self.budget_s:
            line = (
                f"[FAIL] {self.name} "
                f"(runtime {elapsed:.1f}s exceeds {self.budget_s:.0f}s budget)"
            )
        else:
            line = f"[PASS] {self.name} ({elapsed:.1f}s)"
        _LINES.append(line)
        print(line)
        if line.startswith("[FAIL]") and exc_type is None:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion():
    """Factory for timed, budgeted acceptance-criterion blocks."""
    return _Criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
