import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from critbranch.eigen import exact_eigen
from critbranch.io import load_model

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# (criterion number, passed, detail) lines collected by the acceptance suite
ACCEPTANCE = []


@pytest.fixture
def report():
    def _report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append((number, ok, line))
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(ACCEPTANCE, key=lambda x: x[0]):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bin_model():
    return load_model("model-bin")


@pytest.fixture(scope="session")
def two_type():
    return load_model("model-2t")


@pytest.fixture(scope="session")
def three_type():
    return load_model("model-3x")


@pytest.fixture(scope="session")
def finite_models(bin_model, two_type, three_type):
    return [bin_model, two_type, three_type]


@pytest.fixture(scope="session")
def eig():
    cache = {}

    def get(model):
        if model.name not in cache:
            cache[model.name] = exact_eigen(model)
        return cache[model.name]
    return get


@pytest.fixture(scope="session")
def ball():
    return load_model("nbp-ball")


@pytest.fixture
def gen():
    return np.random.default_rng(12345)
