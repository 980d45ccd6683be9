import numpy as np
import pytest

from wisefuse import _kernels

_ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # JIT compilation happens once here so timed tests measure the algorithm
    _kernels.warmup()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def record_acceptance(name: str, detail: str) -> None:
    _ACCEPTANCE_RESULTS.append((name, detail))
    print(f"PASS {name}: {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, detail in _ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"PASS {name}: {detail}")
