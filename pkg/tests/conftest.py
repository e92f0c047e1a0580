import numpy as np
import pytest

from coxsub import Cohort, sort_cohort

# one line per acceptance criterion, shown in the terminal summary where
# pytest's output capture cannot swallow it
ACCEPTANCE_REPORT = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_REPORT:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_REPORT:
            terminalreporter.write_line(line)


def random_cohort(rng, n=None, p=None, tie_fraction=0.3, censoring=0.4):
    """Small random cohort with ties and a controllable censoring level."""
    n = n or int(rng.integers(5, 60))
    p = p or int(rng.integers(1, 4))
    z = rng.standard_normal((n, p))
    t = rng.exponential(1.0, n)
    if tie_fraction > 0:
        ties = rng.random(n) < tie_fraction
        t[ties] = np.round(t[ties], 1) + 0.05  # collide times, keep them positive
    d = (rng.random(n) > censoring).astype(int)
    if d.sum() == 0:
        d[int(rng.integers(0, n))] = 1
    return Cohort(z, t, d)


@pytest.fixture
def rng():
    return np.random.default_rng(20240731)


@pytest.fixture
def small_cohort(rng):
    cohort = random_cohort(rng, n=40, p=2)
    return cohort, sort_cohort(cohort)
