import math

import pytest
from hypothesis import HealthCheck, settings

from secondvar import examples
from secondvar.pontryagin import flow_extremal, shoot

settings.register_profile(
    "default",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def problem(name, **changes):
    p = examples.builtin(name).problem
    return p.with_options(**changes) if changes else p


@pytest.fixture(scope="session")
def ho():
    return shoot(problem("harmonic-oscillator"))


@pytest.fixture(scope="session")
def ho_long():
    """Harmonic-oscillator extremal on [0, 7] through q(0)=0, p(0)=1."""
    return flow_extremal(problem("harmonic-oscillator", t1=7.0), [0.0], [1.0], 0.0, 7.0)


@pytest.fixture(scope="session")
def fp():
    return shoot(problem("free-particle"))


@pytest.fixture(scope="session")
def heis():
    return shoot(problem("heisenberg"))


@pytest.fixture(scope="session")
def heis_conj():
    """Heisenberg extremal with a first conjugate time at t = 1."""
    p = problem("heisenberg", t1=1.5)
    return flow_extremal(p, [0.0, 0.0, 0.0], [1.0, 0.0, math.pi], 0.0, 1.5)


@pytest.fixture(scope="session")
def ex1():
    return shoot(problem("paper-example-1"))


@pytest.fixture(scope="session")
def ex1_section():
    bp = examples.builtin("paper-example-1")
    return bp.section(bp.problem)
