import numpy as np
import pytest

from tracecd import ScmParams, generate_scm


def permutation_scm(V=3, strength=60.0):
    """x_t = pi(x_{t-1}) with pi(a) = a + 1 mod V, up to exp(-strength) leakage."""
    W = np.zeros((1, V, V))
    for a in range(V):
        W[0, a, (a + 1) % V] = strength
    return ScmParams(V, 1, np.zeros(V), W, np.ones(1))


def independence_scm(V=5, m=2):
    return ScmParams(V, m, np.zeros(V), np.zeros((m, V, V)), np.ones(m))


@pytest.fixture
def small_scm():
    return generate_scm(8, 2, 0.2, 0.8, seed=3, weight_scale=3.0)


@pytest.fixture
def desk_scm():
    from tracecd.harness import ExperimentSpec
    return ExperimentSpec().make_scm()


_CRITERIA: dict = {}


def record_criterion(key, ok: bool, detail: str) -> None:
    _CRITERIA[str(key)] = f"CRITERION {key}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("ab")), k)):
        terminalreporter.write_line(_CRITERIA[key])
