import pytest

from fredholm_mc.problem import (
    ConstantKernel,
    Domain,
    FredholmProblem,
    IdentityFreeTerm,
    OneFreeTerm,
    SeparableKernel,
)


def separable(lam=0.9, G=33, quadrature="trapezoid"):
    return FredholmProblem(Domain(1, G, quadrature), SeparableKernel(lam), IdentityFreeTerm())


def constant(lam=0.5, G=17):
    return FredholmProblem(Domain(1, G), ConstantKernel(lam), OneFreeTerm())


@pytest.fixture
def sep09():
    return separable(0.9)


@pytest.fixture
def const05():
    return constant(0.5)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
