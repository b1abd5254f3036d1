import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def vectors(max_len=12, scale=10.0):
    from hypothesis import strategies as st
    from hypothesis.extra.numpy import arrays

    return st.integers(1, max_len).flatmap(
        lambda n: arrays(np.float64, n, elements=st.floats(-scale, scale, allow_nan=False, width=64))
    )


_ACCEPTANCE = pytest.StashKey[dict]()
_START = pytest.StashKey[float]()


def pytest_configure(config):
    import time

    config.stash[_ACCEPTANCE] = {}
    config.stash[_START] = time.perf_counter()


@pytest.fixture
def acceptance(request):
    """``record(number, ok, detail)``: print and keep one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    import time

    lines = config.stash[_ACCEPTANCE]
    if not lines:
        return
    elapsed = time.perf_counter() - config.stash[_START]
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
    terminalreporter.write_line(f"session wall time {elapsed:.1f} s (limit 600 s): "
                                f"{'PASS' if elapsed < 600 else 'FAIL'}")
