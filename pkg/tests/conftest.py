import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "degrad",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("degrad")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_connected_adjacency(rng, n, p=0.4):
    """Random graph made connected by a random spanning path."""
    A = (rng.random((n, n)) < p).astype(float)
    A = np.triu(A, 1)
    A = A + A.T
    perm = rng.permutation(n)
    for i in range(n - 1):
        a, b = perm[i], perm[i + 1]
        A[a, b] = A[b, a] = 1.0
    return A


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_c" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.failed:
        _ACCEPTANCE[name] = "FAIL"
    elif report.when == "call" and report.passed:
        _ACCEPTANCE.setdefault(name, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        num, _, title = name[len("test_c"):].partition("_")
        terminalreporter.write_line(f"{_ACCEPTANCE[name]}  criterion {int(num):2d}: {title.replace('_', ' ')}")
