import numpy as np
import pytest

from lsfa import _kernels
from lsfa.networks import NetworkSpec, init_weights


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def weights():
    return init_weights(NetworkSpec(), seed=0)


@pytest.fixture(params=["numpy", "numba"] if _kernels.NUMBA_AVAILABLE else ["numpy"])
def backend(request):
    with _kernels.use_backend(request.param):
        yield request.param


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(floor, np.max(np.abs(a)), np.max(np.abs(b))))


def directional_fd(f, x, direction, eps=1e-6):
    """Central difference of scalar f along ``direction`` at ``x``."""
    return (f(x + eps * direction) - f(x - eps * direction)) / (2 * eps)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion and return the outcome."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(name, ok, seconds, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}  [{seconds:.1f} s]  {detail}".rstrip()
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
