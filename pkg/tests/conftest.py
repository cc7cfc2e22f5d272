import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from etk.denoiser import GaussianMixturePrior, empirical_prior
from etk.presets import spread_prior, standard_prior
from etk.schedule import build_schedule

settings.register_profile("etk", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("etk")


@pytest.fixture(scope="session")
def sched():
    return build_schedule()


@pytest.fixture(scope="session")
def gauss2():
    return GaussianMixturePrior([1.0], [[0.0, 0.0]], [np.diag([4.0, 1.0])])


@pytest.fixture(scope="session")
def two_comp():
    """Equal-weight components at +-(3, 0) with identity covariance."""
    return GaussianMixturePrior([0.5, 0.5], [[3.0, 0.0], [-3.0, 0.0]], [np.eye(2), np.eye(2)])


@pytest.fixture(scope="session")
def std_prior():
    return standard_prior()


@pytest.fixture(scope="session")
def spread():
    return spread_prior()


@pytest.fixture(scope="session")
def empirical8():
    pts = np.random.default_rng(11).standard_normal((16, 8))
    return empirical_prior(pts, 0.5)


def random_spd(rng, n, scale=1.0):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T / n + 0.2 * np.eye(n))


def random_gmm(rng, n, K):
    w = rng.dirichlet(np.ones(K))
    means = 2.0 * rng.standard_normal((K, n))
    covs = np.stack([random_spd(rng, n) for _ in range(K)])
    return GaussianMixturePrior(w, means, covs)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one result line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, title: str, passed: bool, detail: str, soft: bool = False):
        status = "PASS" if passed else ("SOFT-FAIL" if soft else "FAIL")
        line = f"criterion {number:>2} {status:<9} {title}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
