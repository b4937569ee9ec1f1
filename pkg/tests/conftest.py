"""Shared fixtures and protocol/oracle helpers for the test suite."""

import numpy as np
import pytest

from lqgmpid.bridge import GaussianMixture
from lqgmpid.protocol import CorridorGeometry, Protocol, ProtocolInterval, TimeGrid


def rand_spd(rng, d, scale=1.0):
    M = rng.normal(size=(d, d))
    return scale * (M @ M.T / d + 0.1 * np.eye(d))


def make_interval(rng, d, kind, kappa=None):
    """One protocol interval of a given solver class."""
    kappa = float(rng.uniform(0.5, 1.5)) if kappa is None else kappa
    nu = rng.normal(size=d)
    if kind == "isotropic":
        beta = float(rng.uniform(0.5, 4.0)) * np.eye(d)
        sigma = np.zeros((d, d))
    elif kind == "zero_drift":
        beta = rand_spd(rng, d, 2.0)
        sigma = np.zeros((d, d))
    elif kind == "scalar_drift":
        beta = rand_spd(rng, d, 2.0)
        sigma = float(rng.uniform(-0.4, 0.4)) * np.eye(d)
    elif kind == "general":
        beta = rand_spd(rng, d, 2.0)
        sigma = 0.3 * rng.normal(size=(d, d))
    else:
        raise ValueError(kind)
    return ProtocolInterval(beta=beta, nu=nu, sigma=sigma, kappa=kappa)


INTERVAL_KINDS = ("isotropic", "zero_drift", "scalar_drift", "general")


def make_protocol(rng, d, K, kinds=INTERVAL_KINDS, T=1.0):
    """Random PWC protocol with interval solver classes cycled from `kinds`."""
    intervals = tuple(
        make_interval(rng, d, kinds[k % len(kinds)]) for k in range(K)
    )
    return Protocol(grid=TimeGrid.uniform(K, T), intervals=intervals, dim=d)


@pytest.fixture(scope="session")
def geometry():
    return CorridorGeometry()


@pytest.fixture(scope="session")
def e1_target():
    return GaussianMixture(
        weights=np.array([0.5, 0.5]),
        means=np.array([[3.0, 0.5], [3.0, -0.5]]),
        covariances=np.stack([np.diag([0.06, 0.05])] * 2),
    )


@pytest.fixture(scope="session")
def small_target():
    return GaussianMixture(
        weights=np.array([0.4, 0.6]),
        means=np.array([[1.0, 0.5], [-0.5, 1.5]]),
        covariances=np.stack([
            0.05 * np.eye(2),
            np.array([[0.08, 0.02], [0.02, 0.04]]),
        ]),
    )
