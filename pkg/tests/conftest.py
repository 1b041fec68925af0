import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from labelforge.labelscheme import default_scheme
from labelforge.phantom import default_phantom_spec, generate

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

N_PHANTOMS = 20


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): acceptance criterion covered by this test")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    name = marker.args[0]
    results = item.config._acceptance
    if rep.when == "call" or rep.failed:
        prev_ok, prev_note = results.get(name, (True, ""))
        note = prev_note
        if hasattr(rep, "wasxfail"):
            note = rep.wasxfail
        results[name] = (rep.passed and prev_ok, note)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, note) in results.items():
        line = f"{'PASS' if ok else 'FAIL'}  {name}"
        terminalreporter.write_line(line + (f"  ({note})" if note else ""))


@pytest.fixture(scope="session")
def scheme():
    return default_scheme()


@functools.lru_cache(maxsize=None)
def phantom(seed, sex=None, corruptions="bundle"):
    return generate(default_phantom_spec(seed, sex=sex, corruptions=corruptions))


@pytest.fixture(scope="session")
def bundle_phantoms():
    return [phantom(seed) for seed in range(N_PHANTOMS)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
