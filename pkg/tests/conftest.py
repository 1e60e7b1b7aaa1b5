import functools
import sys

import pytest

from evmmem import fixtures
from evmmem.driver import AnalysisConfig, analyze_contract
from evmmem.needless import compute_rw_maps


def analyze(code, **kw):
    r = analyze_contract(code, AnalysisConfig(**kw), keep_artifacts=True)
    assert r.ok, r.reason
    return r.artifacts


@functools.lru_cache(maxsize=None)
def fixture_and_artifacts(name, **variant):
    fx = fixtures.running2(**variant) if name == "running2" else getattr(fixtures, name)()
    return fx, analyze(fx.code)


@pytest.fixture(scope="session")
def r2():
    return fixture_and_artifacts("running2")


@pytest.fixture(scope="session")
def r3():
    return fixture_and_artifacts("running3")


@pytest.fixture(scope="session")
def r2_maps(r2):
    _, art = r2
    return compute_rw_maps(art.cfg, art.access_solution, art.table)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
