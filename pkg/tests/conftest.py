import numpy as np
import pytest

from lbtrace.levelset import sphere, tooth

BOX = ((-2.0,) * 3, (2.0,) * 3)


@pytest.fixture(scope="session")
def unit_sphere():
    return sphere(bbox=BOX)


@pytest.fixture(scope="session")
def tooth_surface():
    return tooth()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record the checks of one acceptance criterion and print a verdict line.

    Call ``criterion(number, {name: (ok, detail)})`` once; the test fails when
    any check fails.  A test that errors before recording is reported as FAIL.
    """
    log = request.config.stash[ACCEPTANCE]
    state = {}

    def record(number, checks):
        bad = [f"{k}: {d}" for k, (ok, d) in checks.items() if not ok]
        good = [f"{k}: {d}" for k, (ok, d) in checks.items() if ok]
        verdict = "PASS" if not bad else "FAIL"
        line = f"criterion {number}: {verdict}  " + "; ".join(bad or good)
        state["number"] = number
        log.append(line)
        print(line)
        assert not bad, "\n".join(bad)

    yield record
    if "number" not in state:
        log.append(f"criterion {request.node.name}: FAIL  (error before verdict)")
