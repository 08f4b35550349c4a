import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from synthzsd.datakit import ToyWorldSpec, gen_detection_scenes, gen_feature_set, gen_toy_world
from synthzsd.numerics import RandomStream

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def stream():
    return RandomStream(1234)


@pytest.fixture(scope="session")
def small_spec():
    return ToyWorldSpec(d=4, D=8, S=4, U=2, records_per_class=40, background_records=80, n_scenes=6)


@pytest.fixture(scope="session")
def small_world(small_spec):
    return gen_toy_world(small_spec, RandomStream(7))


@pytest.fixture(scope="session")
def small_features(small_world, small_spec):
    return gen_feature_set(small_world, small_spec, RandomStream(8))


@pytest.fixture(scope="session")
def small_scenes(small_world, small_spec):
    return gen_detection_scenes(small_world, small_spec, RandomStream(9))


def random_boxes(rng, n, size=50.0):
    xy = rng.uniform(0, size, (n, 2))
    wh = rng.uniform(1.0, size / 2, (n, 2))
    return np.hstack([xy, xy + wh])


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """``record(n, ok, detail)`` prints and keeps one PASS/FAIL line per acceptance criterion."""

    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
