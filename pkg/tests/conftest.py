import pytest

from support import with_cert, world


@pytest.fixture
def w():
    return world()


@pytest.fixture
def certified(w):
    with_cert(w, {"min_cas": 1})
    return w


def pytest_terminal_summary(terminalreporter):
    from support import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
