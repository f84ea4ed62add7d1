import numpy as np
import pytest

from mflab.kernel import KernelSpec
from mflab.meanfield import ExactSolution, exact_at


@pytest.fixture(scope="session")
def log2():
    return KernelSpec.log(2)


@pytest.fixture(scope="session")
def coulomb3():
    return KernelSpec.riesz(3, 1.0)


@pytest.fixture(scope="session")
def riesz1():
    return KernelSpec.riesz(1, 0.5)


@pytest.fixture(scope="session")
def unit_disk(log2):
    return exact_at(ExactSolution("uniform_ball_static", log2, R0=1.0), 0.0)


@pytest.fixture(scope="session")
def smooth_bump(log2):
    sol = ExactSolution("radial_vortex_patch", log2, R0=1.0, profile="smooth_bump")
    return exact_at(sol, 0.0)


def rel_err(got, want):
    got, want = float(got), float(want)
    return abs(got - want) / (abs(want) if want != 0 else 1.0)


@pytest.fixture(scope="session")
def tmp_out(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


def pytest_configure(config):
    np.seterr(all="raise", under="ignore")
