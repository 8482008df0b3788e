import numpy as np
import pytest
from scipy.stats import norm

from cpdl.encoder import LinearEncoder, softplus_inverse
from cpdl.graph import OdSpec, parallel_edges
from cpdl.pref_dist import SIGMA_FLOOR

ACCEPTANCE_RESULTS: dict[str, str] = {}


def two_route_prob(mu, sigma):
    """Closed form P(route 0 chosen) for two independent log-normal routes."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return norm.cdf((mu[1] - mu[0]) / np.sqrt(sigma[0] ** 2 + sigma[1] ** 2))


class TwoRoute:
    """Two parallel edges driven by a linear encoder on identity features.

    theta = (mu_0, mu_1, pre_sigma_0, pre_sigma_1) so every coordinate maps
    to exactly one distribution parameter.
    """

    def __init__(self, mu=(0.0, 1.0), sigma=(1.0, 1.0)):
        self.graph = parallel_edges(2)
        self.od = OdSpec(0, 1)
        self.model = LinearEncoder(2)
        self.X = np.eye(2)
        pre = softplus_inverse(np.asarray(sigma, dtype=float) - SIGMA_FLOOR)
        self.theta = np.concatenate([np.asarray(mu, dtype=float), pre])

    def dist_of(self, theta):
        return self.model.forward(theta, self.X)[0]

    def oracle_loss(self, theta, phi_bar):
        d = self.dist_of(theta)
        p = two_route_prob(d.mu, d.sigma)
        return float(np.sum((np.asarray(phi_bar) - np.array([p, 1.0 - p])) ** 2))

    def oracle_grad(self, theta, phi_bar, h=1e-6):
        return np.array(
            [
                (self.oracle_loss(theta + h * e, phi_bar) - self.oracle_loss(theta - h * e, phi_bar)) / (2 * h)
                for e in np.eye(len(theta))
            ]
        )


@pytest.fixture
def two_route():
    return TwoRoute()


@pytest.fixture
def record():
    def _record(criterion: str, passed: bool, detail: str):
        ACCEPTANCE_RESULTS[criterion] = f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}"
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k[2:])):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
