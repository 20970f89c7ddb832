import numpy as np
import pytest


def random_homography(rng, strength=1e-3, scale=1.0):
    """Mild random projective map of a few-hundred-pixel image."""
    H = np.eye(3)
    H[:2, :2] += rng.normal(0, 0.1, (2, 2)) * scale
    H[:2, 2] = rng.normal(0, 20, 2)
    H[2, :2] = rng.normal(0, strength, 2)
    return H


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report -------------------------------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[props["criterion"]] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: int(s.split()[0])):
        terminalreporter.write_line(f"{'PASS' if _CRITERIA[name] == 'passed' else 'FAIL'}  {name}")
