import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from anomize.benchmark import build_benchmark
from anomize.dataio import SynthSpec

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_spec(**overrides) -> SynthSpec:
    base = dict(seed=7, train_per_class=4, test_per_class=2, n_min=16, n_max=40, burst_min=4, burst_max=10)
    base.update(overrides)
    return SynthSpec(**base)


@pytest.fixture(scope="session")
def small_bench(tmp_path_factory):
    """A reduced synthetic corpus for fast end-to-end tests."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_benchmark(small_spec(), tmp_path_factory.mktemp("small_bench"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then enforce it."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, ACCEPTANCE[number]

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
