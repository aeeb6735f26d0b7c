import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatsim.synthetic import default_intrinsics, gen_scene, orbit_poses

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def bench_scene():
    """The standard synthetic scene: 500 volume Gaussians in the unit box."""
    return gen_scene(0, 500, 1.0)


@pytest.fixture(scope="session")
def bench_intrinsics():
    return default_intrinsics()


@pytest.fixture(scope="session")
def bench_poses(bench_intrinsics):
    return orbit_poses(60, bench_intrinsics)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def verdicts(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(VERDICTS, [])
    return lines


VERDICTS = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
