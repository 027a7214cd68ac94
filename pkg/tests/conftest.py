import sys
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

# let test modules import the shared oracles and helpers
sys.path.insert(0, str(Path(__file__).parent))

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """Context manager timing one acceptance criterion and recording PASS/FAIL."""
    results = request.config.stash[_RESULTS]

    @contextmanager
    def run(number: int, title: str, limit_s: float):
        start = time.perf_counter()
        ok = False
        try:
            yield
            elapsed = time.perf_counter() - start
            assert elapsed < limit_s, f"took {elapsed:.2f}s, limit {limit_s}s"
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({elapsed:.2f}s / {limit_s:g}s) {title}"
            results.append((number, line))
            print(line)

    return run


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(results):
            terminalreporter.write_line(line)
