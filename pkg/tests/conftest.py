import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from causal_clustering.forest import ForestParams
from causal_clustering.pipeline import crossfit_cate
from causal_clustering.simgen import RecoveryConfig, gen_gaussian_clusters

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

SMALL_FOREST = ForestParams(n_trees=60, seed=3)


@pytest.fixture(scope="session")
def small_recovery():
    return gen_gaussian_clusters(RecoveryConfig(n=300, k_true=3, seed=5))


@pytest.fixture(scope="session")
def small_crossfit(small_recovery):
    return crossfit_cate(small_recovery, params=SMALL_FOREST)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion (printed at session end)."""

    def record(tag, ok, detail):
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  criterion {tag}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
