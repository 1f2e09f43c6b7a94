import numpy as np
import pytest

from rdcp.core import JointSource


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def two_context_source(a=0.1, b=0.9):
    """Y uniform binary, X | y=0 ~ Bern(a), X | y=1 ~ Bern(b)."""
    pmf = 0.5 * np.array([[1 - a, 1 - b], [a, b]])
    return JointSource((0, 1), (0, 1), pmf, x_values=[0.0, 1.0])


def h2(p):
    if p <= 0 or p >= 1:
        return 0.0
    return float(-p * np.log2(p) - (1 - p) * np.log2(1 - p))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
