import pytest
from hypothesis import settings

from tokdpo.mdp import TokenMdp

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log(request):
    """Record one PASS/FAIL line per criterion for the end-of-run summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def log(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)

    return log


@pytest.fixture
def small_mdp():
    return TokenMdp(3, 0, 3, ((1,), (2, 1)))


@pytest.fixture
def bandit_mdp():
    return TokenMdp(2, 0, 2, ((1,),))
