import numpy as np
import pytest

from commuteproj.mesh import build_mesh, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cube():
    return generate("cube-kuhn")


@pytest.fixture(scope="session")
def cube1():
    return generate("cube-kuhn:refined=1")


@pytest.fixture(scope="session")
def reftet():
    return generate("reftet")


def random_tet(rng, kappa_max=10.0):
    """Random tetrahedron with shape regularity at most kappa_max."""
    from commuteproj.mesh import shape_regularity
    while True:
        X = rng.random((4, 3))
        try:
            m = build_mesh(X, [[0, 1, 2, 3]])
        except ValueError:
            continue
        if shape_regularity(m) <= kappa_max:
            return m


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
