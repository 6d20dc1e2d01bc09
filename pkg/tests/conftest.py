import numpy as np
import pytest

from nsmix.config import default_forcing
from nsmix.noise import CylinderSpec, build_noise_basis
from nsmix.solver import integrate, ForcingProfile
from nsmix.spectral import SpectralVelocity, build_grid


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running numerical experiments")


@pytest.fixture(scope="session")
def grid4():
    return build_grid(4)


@pytest.fixture(scope="session")
def grid8():
    return build_grid(8)


@pytest.fixture(scope="session")
def basis4(grid4):
    return build_noise_basis(CylinderSpec(), 16, grid=grid4, n_active=16)


@pytest.fixture(scope="session")
def basis8(grid8):
    return build_noise_basis(CylinderSpec(), 64, grid=grid8, n_active=32)


@pytest.fixture(scope="session")
def h4(grid4):
    return default_forcing(grid4)


@pytest.fixture(scope="session")
def h8(grid8):
    return default_forcing(grid8)


def periodic_state(grid, h, nu=0.5, dt=1e-2, tol=1e-12):
    """Iterate the unperturbed time-one map from rest to its attracting fixed point."""
    f = ForcingProfile(grid, h).mesh(dt)
    a = np.zeros(grid.M, complex)
    for _ in range(2000):
        nxt = integrate(grid, a, f, nu, dt)
        if np.linalg.norm(grid.to_real(nxt - a)) <= tol:
            break
        a = nxt
    return SpectralVelocity(grid, nxt)


@pytest.fixture(scope="session")
def uhat4(grid4, h4):
    return periodic_state(grid4, h4, dt=1e-2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
